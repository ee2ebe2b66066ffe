use gradphi::dynamics::{evolve_trajectory, sample_gibbs, ProbeTraces};
use gradphi::estimators::*;
use gradphi::lattice::gradient_field;
use gradphi::spectral_oracle::gaussian_variance;
use gradphi::stats::{linear_fit, mean_and_stderr};
use gradphi::{Error, EvolveParams, LangevinConfig, PotentialSpec, Torus};
use rand_distr::{Distribution, StandardNormal};

fn quartic() -> PotentialSpec {
    PotentialSpec::power(4.0, 0.25).unwrap()
}

fn gradient_samples(
    torus: &Torus,
    v: &PotentialSpec,
    cfg: &LangevinConfig,
    per_chain: usize,
) -> Vec<f64> {
    let (obs, _) = sample_gibbs(torus, v, cfg, "grads", per_chain, |phi| {
        let mut g = vec![0.0; torus.edge_count()];
        gradient_field(torus, phi, &mut g);
        g
    })
    .unwrap();
    obs.into_iter().flatten().flatten().collect()
}

#[test]
fn mc_variance_matches_the_gaussian_oracle() {
    for d in [1, 2] {
        let torus = Torus::new(d, 1).unwrap();
        let cfg = LangevinConfig::for_torus(1, 11);
        let r = mc_variance(
            &torus,
            &PotentialSpec::gaussian(),
            &cfg,
            5000,
            VarianceObservable::Origin,
            "mc",
        )
        .unwrap();
        let exact = gaussian_variance(d, 1).unwrap();
        assert!((exact - 2.0 / 9.0).abs() < 1e-12);
        assert!(
            (r.estimate - exact).abs() < 3.0 * r.stderr,
            "d={d}: {} ± {}",
            r.estimate,
            r.stderr
        );
        let (m, s) = (r.extra["mean_phi0"], r.extra["mean_phi0_stderr"]);
        assert!(m.abs() < 3.0 * s, "mean {m} ± {s}");
        assert!(r.stderr > 0.0 && r.n >= 2);
    }
}

#[test]
fn mc_variance_needs_enough_batches() {
    let torus = Torus::new(1, 1).unwrap();
    let cfg = LangevinConfig::for_torus(1, 1);
    let r = mc_variance(
        &torus,
        &PotentialSpec::gaussian(),
        &cfg,
        3,
        VarianceObservable::Origin,
        "few",
    );
    assert!(matches!(r, Err(Error::TooFewBatches { .. })));
}

#[test]
fn variance_does_not_depend_on_chain_split() {
    let torus = Torus::new(1, 2).unwrap();
    let v = quartic();
    let mut cfg = LangevinConfig::for_torus(2, 21);
    let a = mc_variance(
        &torus,
        &v,
        &cfg,
        8000,
        VarianceObservable::TranslationAveraged,
        "split",
    )
    .unwrap();
    cfg.chain_count *= 2;
    let b = mc_variance(
        &torus,
        &v,
        &cfg,
        4000,
        VarianceObservable::TranslationAveraged,
        "split",
    )
    .unwrap();
    assert!(
        (a.estimate - b.estimate).abs() < 3.0 * combined_sigma(&a, &b),
        "{} vs {}",
        a.estimate,
        b.estimate
    );
}

#[test]
fn deterministic_hs_equals_the_spectral_variance() {
    let torus = Torus::new(1, 1).unwrap();
    let cfg = LangevinConfig::for_torus(1, 1);
    let r = hs_variance(
        &torus,
        &PotentialSpec::gaussian(),
        &cfg,
        &HsConfig::new(1),
        "hs",
    )
    .unwrap();
    assert!((r.estimate - 2.0 / 9.0).abs() < 1e-6, "{}", r.estimate);
    assert!(r.truncation_bound.unwrap() < 1e-6);
}

#[test]
fn hs_and_mc_agree_for_the_quartic_cycle() {
    let torus = Torus::new(1, 1).unwrap();
    let v = quartic();
    let cfg = LangevinConfig::for_torus(1, 5);
    let mc = mc_variance(&torus, &v, &cfg, 20_000, VarianceObservable::Origin, "mc").unwrap();
    let hs = hs_variance(&torus, &v, &cfg, &HsConfig::new(64), "hs").unwrap();
    let z = (mc.estimate - hs.estimate) / combined_sigma(&mc, &hs);
    assert!(
        z.abs() < 3.0,
        "mc {} ± {}, hs {} ± {}",
        mc.estimate,
        mc.stderr,
        hs.estimate,
        hs.stderr
    );
    assert!(hs.truncation_bound.unwrap() < hs.stderr);
    assert!(matches!(
        hs_variance(&torus, &v, &cfg, &HsConfig::new(4), "hs"),
        Err(Error::TooFewTrajectories { .. })
    ));
}

#[test]
fn hs_variance_grows_with_l_in_two_dimensions() {
    let v = quartic();
    let est: Vec<EstimateReport> = [(4usize, 64), (8, 32)]
        .iter()
        .map(|&(l, n)| {
            let torus = Torus::new(2, l).unwrap();
            let cfg = LangevinConfig::for_torus(l, 9);
            hs_variance(&torus, &v, &cfg, &HsConfig::new(n), "grow").unwrap()
        })
        .collect();
    let z = (est[1].estimate - est[0].estimate) / combined_sigma(&est[0], &est[1]);
    assert!(
        z > 3.0,
        "{} ± {} vs {} ± {}",
        est[0].estimate,
        est[0].stderr,
        est[1].estimate,
        est[1].stderr
    );
}

#[test]
fn gradient_tail_examples() {
    assert!(matches!(
        gradient_tail(&vec![0.0; 20_000], 1),
        Err(Error::TooFewTailPoints { .. })
    ));
    let torus = Torus::new(1, 8).unwrap();
    let cfg = LangevinConfig::for_torus(8, 3);
    for (v, lo, hi) in [(PotentialSpec::gaussian(), 1.6, 2.4), (quartic(), 3.0, 5.0)] {
        let samples = gradient_samples(&torus, &v, &cfg, 2000);
        let r = gradient_tail(&samples, 4).unwrap();
        let target = (lo + hi) / 2.0;
        assert!(
            (lo..=hi).contains(&r.estimate),
            "{} {}",
            v.tag(),
            r.estimate
        );
        assert!(
            r.extra["ci_low"] <= target && target <= r.extra["ci_high"],
            "{} {:?}",
            v.tag(),
            r.extra
        );
        assert!(r.curve.iter().all(|c| (0.0..=1.0).contains(&c.y)));
        assert!(r
            .curve
            .windows(2)
            .all(|w| w[0].x <= w[1].x && w[1].y <= w[0].y));
    }
}

#[test]
fn survival_curve_on_iid_normals() {
    let mut rng = gradphi::rng::stream(2, "survival");
    let mut x: Vec<f64> = (0..10_000)
        .map(|_| StandardNormal.sample(&mut rng))
        .map(|x: f64| x.abs())
        .collect();
    x.sort_by(f64::total_cmp);
    let c = survival_curve(&x, 50);
    assert!(c.windows(2).all(|w| w[1].y <= w[0].y));
    assert!(c.iter().all(|p| (0.0..=1.0).contains(&p.y)));
}

#[test]
fn pinned_trajectory_never_stays_confined() {
    let torus = Torus::new(1, 1).unwrap();
    let v = PotentialSpec::flat_bottom(1.0, 0.0).unwrap();
    let r = 0.5;
    // gradients ±2R are outside [-R, R]; no noise and no drift in the flat region
    let phi0 = [0.0, 1.0, -1.0];
    let params = EvolveParams {
        noise_scale: 0.0,
        ..EvolveParams::new(0.01, 0.01)
    };
    let exits = exit_times(&torus, &v, &phi0, &params, r, 200, 1, "pinned").unwrap();
    let curve = ConfinementCurve::from_exit_times(r, &[0.0, 0.5, 1.0, 2.0], &[exits]);
    assert!(curve.probability.iter().all(|&p| p == 0.0));
}

#[test]
fn short_time_confinement_is_the_marginal() {
    let torus = Torus::new(1, 2).unwrap();
    let v = PotentialSpec::gaussian();
    let cfg = LangevinConfig::for_torus(2, 13);
    let curve = confinement_probability(
        &torus,
        &v,
        &cfg,
        &EvolveParams::new(0.01, 0.002),
        1.0,
        &[0.0, 0.01],
        400,
        "t0",
    )
    .unwrap();
    let samples = gradient_samples(&torus, &v, &LangevinConfig { seed: 14, ..cfg }, 1000);
    let inside: Vec<f64> = samples
        .iter()
        .map(|g| (g.abs() <= 1.0) as u8 as f64)
        .collect();
    let batches: Vec<f64> = inside.chunks(500).map(gradphi::stats::mean).collect();
    let (p, se) = mean_and_stderr(&batches);
    let diff = curve.probability[0] - p;
    assert!(
        diff.abs() < 3.0 * (se * se + curve.stderr[0].powi(2)).sqrt(),
        "{} vs {p}",
        curve.probability[0]
    );
    assert!(curve.probability[1] <= curve.probability[0]);
    assert!(curve.probability.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn confinement_matches_a_refined_simulation() {
    let torus = Torus::new(1, 1).unwrap();
    let v = PotentialSpec::gaussian();
    let cfg = LangevinConfig::for_torus(1, 17);
    let grid = [0.002, 0.005, 0.01, 1.0];
    let coarse = confinement_probability(
        &torus,
        &v,
        &cfg,
        &EvolveParams::new(1e-4, 1e-4),
        0.1,
        &grid,
        1000,
        "coarse",
    )
    .unwrap();
    let fine = confinement_probability(
        &torus,
        &v,
        &cfg,
        &EvolveParams::new(1e-5, 1e-5),
        0.1,
        &grid,
        1000,
        "fine",
    )
    .unwrap();
    for (i, t) in grid.iter().enumerate() {
        let s = (coarse.stderr[i].powi(2) + fine.stderr[i].powi(2)).sqrt();
        let diff = coarse.probability[i] - fine.probability[i];
        assert!(
            diff.abs() <= 3.0 * s,
            "T={t}: {} vs {} (σ {s})",
            coarse.probability[i],
            fine.probability[i]
        );
    }
    assert!(confinement_probability(
        &torus,
        &v,
        &cfg,
        &EvolveParams::new(0.01, 0.01),
        0.0,
        &grid,
        8,
        "bad"
    )
    .is_err());
}

fn quartic_traces(trajectories: usize, horizon: f64) -> Vec<ProbeTraces> {
    let torus = Torus::new(1, 2).unwrap();
    let v = quartic();
    let cfg = LangevinConfig::for_torus(2, 23);
    let starts = stationary_starts(&torus, &v, &cfg, "sup/starts", trajectories).unwrap();
    let probes: Vec<usize> = (0..torus.edge_count()).collect();
    starts
        .iter()
        .enumerate()
        .map(|(i, phi0)| {
            evolve_trajectory(
                &torus,
                &v,
                phi0,
                &EvolveParams::new(0.01, 0.005),
                horizon,
                23,
                &format!("sup/{i}"),
                &probes,
            )
            .unwrap()
            .1
        })
        .collect()
}

#[test]
fn supremum_tail_of_the_quartic_model() {
    let traces = quartic_traces(1000, 8.0);
    let mut initial: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.values[..t.edges.len()].to_vec())
        .collect();
    initial.sort_by(f64::total_cmp);
    let k1 = gradphi::stats::quantile_sorted(&initial, 0.01);
    let low = supremum_tail(&traces, 0.01, 1.0, &[k1]).unwrap();
    assert!(low.estimate >= 0.95);

    // log-survival is linear in K⁴ over the resolved band
    let ks: Vec<f64> = (0..40).map(|i| 1.0 + 0.05 * i as f64).collect();
    let tail = supremum_tail(&traces, 0.01, 1.0, &ks).unwrap();
    let band: Vec<_> = tail
        .curve
        .iter()
        .filter(|c| c.y > 2e-3 && c.y < 0.5)
        .collect();
    assert!(band.len() >= 5);
    let fit = linear_fit(
        &band.iter().map(|c| c.x.powi(4)).collect::<Vec<_>>(),
        &band.iter().map(|c| c.y.ln()).collect::<Vec<_>>(),
    );
    assert!(fit.r2 >= 0.9 && fit.slope < 0.0, "{fit:?}");

    // roughly linear growth in T once the horizon exceeds the decorrelation time
    let k = 2.0;
    let p4 = supremum_tail(&traces, 0.01, 4.0, &[k]).unwrap().estimate;
    let p8 = supremum_tail(&traces, 0.01, 8.0, &[k]).unwrap().estimate;
    assert!((1.5..=2.5).contains(&(p8 / p4)), "{p4} {p8}");
    assert!(supremum_tail(&traces, 0.01, 9.0, &[k]).is_err());
}

#[test]
fn frozen_supremum_is_the_initial_marginal() {
    let torus = Torus::new(1, 2).unwrap();
    let v = PotentialSpec::flat_bottom(10.0, 0.0).unwrap();
    let params = EvolveParams {
        noise_scale: 0.0,
        ..EvolveParams::new(0.1, 0.01)
    };
    let phi0 = [0.0, 1.5, -0.5, 2.0, -3.0];
    let (_, traces) = evolve_trajectory(
        &torus,
        &v,
        &phi0,
        &params,
        2.0,
        1,
        "frozen",
        &[0, 1, 2, 3, 4],
    )
    .unwrap();
    let tail = supremum_tail(
        std::slice::from_ref(&traces),
        0.1,
        2.0,
        &[0.5, 1.5, 2.0, 3.0, 5.1],
    )
    .unwrap();
    let init = &traces.values[..5];
    for c in &tail.curve {
        let p = init.iter().filter(|&&g| g >= c.x).count() as f64 / 5.0;
        assert_eq!(c.y, p);
    }
}
