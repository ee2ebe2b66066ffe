use gradphi::potential::ProbeGrid;
use gradphi::PotentialSpec;
use rand::Rng;

fn families() -> Vec<PotentialSpec> {
    vec![
        PotentialSpec::gaussian(),
        PotentialSpec::power(4.0, 0.25).unwrap(),
        PotentialSpec::power(3.0, 1.0 / 3.0).unwrap(),
        PotentialSpec::flat_bottom(1.0, 0.0).unwrap(),
        PotentialSpec::flat_bottom(2.0, 0.5).unwrap(),
    ]
}

#[test]
fn derivatives_match_finite_differences() {
    let mut rng = gradphi::rng::stream(3, "test/potential");
    let h = 1e-5;
    for v in families() {
        for _ in 0..1000 {
            let x: f64 = rng.random_range(-20.0..20.0);
            let d1 = (v.value(x + h) - v.value(x - h)) / (2.0 * h);
            let d2 = (v.first(x + h) - v.first(x - h)) / (2.0 * h);
            let (_, f1, f2) = v.evaluate(x);
            assert!(
                (d1 - f1).abs() <= 1e-5 * f1.abs().max(1.0),
                "{} V' at {x}",
                v.tag()
            );
            assert!(
                (d2 - f2).abs() <= 1e-5 * f2.abs().max(1.0),
                "{} V'' at {x}",
                v.tag()
            );
        }
    }
}

#[test]
fn r_v_is_tight() {
    for v in families() {
        let r = v.r_v().unwrap();
        let grid: Vec<f64> = (0..=200_000)
            .map(|i| -50.0 + 100.0 * i as f64 / 200_000.0)
            .collect();
        for &x in &grid {
            if x.abs() >= r / 2.0 {
                assert!(v.second(x) >= 1.0 - 1e-9, "{} at {x}", v.tag());
            }
        }
        if r > 2.0 {
            // shrinking R by 2% exposes a point where V'' < 1
            let reduced = 0.98 * r / 2.0;
            assert!(grid
                .iter()
                .any(|&x| x.abs() >= reduced && x.abs() >= r / 2.0 - 0.01 && v.second(x) < 1.0));
        }
    }
}

#[test]
fn flat_bottom_r_v() {
    let v = PotentialSpec::flat_bottom(1.0, 0.0).unwrap();
    let expected = 2.0 * (1.0 + 12f64.powf(-0.5));
    assert!((v.r_v().unwrap() - expected).abs() < 1e-7);
    assert!((v.compute_r_v(1000.0).unwrap() - expected).abs() < 1e-7);
}

#[test]
fn validation_report_windows() {
    let v = PotentialSpec::power(4.0, 0.25).unwrap();
    let report = v.validate_assumption(&ProbeGrid::default());
    assert!(report.passed());
    assert!(report.window >= 10.0 * v.r_v().unwrap());
    assert!((report.c_minus - 3.0).abs() < 1e-9 && (report.c_plus - 3.0).abs() < 1e-9);
    let g = PotentialSpec::gaussian().validate_assumption(&ProbeGrid::default());
    assert!(!g.clause_ii && g.special.is_some());
}

#[test]
fn kinked_table_fails_clause_i() {
    let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.5).collect();
    let vs: Vec<f64> = xs.iter().map(|x| x.abs()).collect();
    let v = PotentialSpec::table(xs, vs, None, "abs").unwrap();
    let report = v.validate_assumption(&ProbeGrid {
        points: 20_000,
        x_max: Some(19.0),
    });
    assert!(!report.clause_i);
}
