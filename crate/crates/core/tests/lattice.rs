use gradphi::lattice::*;
use gradphi::PotentialSpec;
use proptest::prelude::*;

fn field(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = gradphi::rng::stream(seed, "test/field");
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

#[test]
fn large_torus_sizes() {
    let t = Torus::new(2, 32).unwrap();
    assert_eq!(t.vertex_count(), 4225);
    assert_eq!(t.edge_count(), 8450);
}

#[test]
fn closure_has_4d_minus_1_edges() {
    for d in 1..=3 {
        let t = Torus::new(d, 2).unwrap();
        for e in 0..t.edge_count() {
            let c = t.closure(e);
            assert_eq!(c.len(), 4 * d - 1);
            assert!(c.contains(&e));
            let ends = [t.tail(e), t.head(e)];
            for &f in c {
                assert!(ends.contains(&t.tail(f)) || ends.contains(&t.head(f)));
            }
            let mut sorted = c.to_vec();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), c.len());
        }
    }
}

#[test]
fn every_vertex_has_2d_incident_edges() {
    let t = Torus::new(3, 1).unwrap();
    for x in 0..t.vertex_count() {
        let inc: Vec<usize> = t.incoming(x).chain(t.outgoing(x)).collect();
        assert_eq!(inc.len(), 6);
    }
}

#[test]
fn dynamic_divergence_examples() {
    let t = Torus::new(1, 1).unwrap();
    let phi = [0.0, 1.0, -1.0];
    assert_eq!(dynamic_divergence(&t, &phi, &[1.0; 3], 1), -3.0);
    assert_eq!(dynamic_divergence(&t, &phi, &[0.0; 3], 1), 0.0);
    let gaussian = PotentialSpec::gaussian();
    assert_eq!(nonlinear_divergence(&t, &phi, &gaussian, 0), 0.0);
    let quartic = PotentialSpec::power(4.0, 0.25).unwrap();
    assert_eq!(nonlinear_divergence(&t, &[0.7; 3], &quartic, 2), 0.0);
}

#[test]
fn divergence_sums_to_zero() {
    let t = Torus::new(2, 3).unwrap();
    let u = field(t.vertex_count(), 1);
    let a: Vec<f64> = field(t.edge_count(), 2).iter().map(|x| x.abs()).collect();
    let total: f64 = (0..t.vertex_count())
        .map(|x| dynamic_divergence(&t, &u, &a, x))
        .sum();
    assert!(total.abs() < 1e-12);
}

#[test]
fn lp_norm_examples() {
    let t = Torus::new(1, 1).unwrap();
    let phi = [0.0, 1.0, -1.0];
    let n = |p, norm| {
        lp_norm(
            &t,
            &phi,
            Support::Vertices,
            Exponent::Finite(p),
            Region::Torus,
            norm,
        )
        .unwrap()
    };
    assert!((n(2.0, false) - 2f64.sqrt()).abs() < 1e-15);
    assert!((n(1.0, true) - 2.0 / 3.0).abs() < 1e-15);
    let t2 = Torus::new(2, 3).unwrap();
    let ones = vec![1.0; t2.vertex_count()];
    for p in [1.0, 1.5, 2.0, 7.0] {
        let v = lp_norm(
            &t2,
            &ones,
            Support::Vertices,
            Exponent::Finite(p),
            Region::Torus,
            true,
        )
        .unwrap();
        assert!((v - 1.0).abs() < 1e-14);
    }
    let sup = lp_norm(
        &t,
        &phi,
        Support::Vertices,
        Exponent::Inf,
        Region::Torus,
        false,
    )
    .unwrap();
    assert_eq!(sup, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integration_by_parts(d in 1usize..=3, l in 1usize..=3, seed in any::<u64>()) {
        let t = Torus::new(d, l).unwrap();
        let u = field(t.vertex_count(), seed);
        let v = field(t.vertex_count(), seed ^ 0x55);
        let a: Vec<f64> = field(t.edge_count(), seed ^ 0xaa).iter().map(|x| x.abs()).collect();
        let lhs: f64 = (0..t.vertex_count()).map(|x| dynamic_divergence(&t, &u, &a, x) * v[x]).sum();
        let rhs: f64 = -(0..t.edge_count()).map(|e| a[e] * gradient(&t, &u, e) * gradient(&t, &v, e)).sum::<f64>();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
    }

    #[test]
    fn gradient_ignores_constant_shifts(seed in any::<u64>(), c in -1e3f64..1e3) {
        let t = Torus::new(2, 2).unwrap();
        let f = field(t.vertex_count(), seed);
        let g: Vec<f64> = f.iter().map(|x| x + c).collect();
        for e in 0..t.edge_count() {
            prop_assert!((gradient(&t, &f, e) - gradient(&t, &g, e)).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_keeps_gradients(seed in any::<u64>()) {
        let t = Torus::new(2, 2).unwrap();
        let f = field(t.vertex_count(), seed);
        let mut p = LatticeField::from_values(&t, f.clone()).unwrap();
        p.project_mean_zero();
        prop_assert!(p.is_mean_zero());
        for e in 0..t.edge_count() {
            prop_assert!((gradient(&t, &f, e) - gradient(&t, &p.values, e)).abs() < 1e-12);
        }
    }
}
