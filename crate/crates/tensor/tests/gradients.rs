//! Finite-difference checks for every differentiable primitive, 20+ seeds each.

use rand::Rng;
use tslm_tensor::rng::{rng_from, SeedRng};
use tslm_tensor::{grad_check, suite, Graph, Result, Tensor};

const TOL: f64 = 1e-5;
const SEEDS: u64 = 24;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

fn check_each_seed(name: &str, case: fn(&mut SeedRng) -> Result<f64>) {
    for seed in 0..SEEDS {
        let err = case(&mut rng_from(seed)).unwrap();
        assert!(err < TOL, "{name}: seed {seed} error {err:e}");
    }
}

#[test]
fn every_primitive_passes() {
    for (name, case) in suite::CASES {
        check_each_seed(name, case);
    }
}

#[test]
fn suite_reports_every_case() {
    let report = suite::run_suite(2).unwrap();
    assert_eq!(report.len(), suite::CASES.len());
    assert!(report.iter().all(|(_, e)| *e < TOL));
}

#[test]
fn grad_check_of_square() {
    let x = Tensor::new(&[1], vec![3.0f64]).unwrap();
    let err = grad_check(|g, v| { let s = g.mul(v, v)?; g.sum(s) }, &x).unwrap();
    assert!(err < 1e-5);
    let err = grad_check(|g, v| { let s = g.scale(v, 2.5)?; g.sum(s) }, &x).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn conv_adjoint_identity() {
    for seed in 0..SEEDS {
        let mut rng = rng_from(1000 + seed);
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let half = rng.gen_range(2..=8);
        let len = 2 * half;
        let w = random(&mut rng, &[cout, cin, 3]);
        let x = random(&mut rng, &[cin, len]);
        let y = random(&mut rng, &[cout, half]);
        let mut g = Graph::<f64>::new();
        let (xv, wv, yv) = (g.constant(x.clone()).unwrap(), g.constant(w).unwrap(), g.constant(y.clone()).unwrap());
        let fwd = g.conv1d(xv, wv, 2, 1).unwrap();
        let adj = g.conv1d_transpose(yv, wv, 2, 1, 1).unwrap();
        assert_eq!(g.shape(adj), x.shape());
        let lhs = g.value(fwd).inner(&y);
        let rhs = x.inner(g.value(adj));
        assert!((lhs - rhs).abs() < 1e-5 * lhs.abs().max(1.0), "seed {seed}: {lhs} vs {rhs}");
    }
}
