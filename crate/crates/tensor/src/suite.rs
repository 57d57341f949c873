//! Randomised gradient checks for every differentiable primitive.
//!
//! Each case draws small random shapes and inputs from the given rng and
//! returns the worst relative error between autodiff and central
//! differences.

use rand::Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_many};
use crate::graph::{Graph, Var};
use crate::rng::{rng_from, SeedRng};
use crate::tensor::Tensor;

pub type Case = fn(&mut SeedRng) -> Result<f64>;

fn random(rng: &mut SeedRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("shape matches data")
}

fn dims(rng: &mut SeedRng) -> (usize, usize, usize) {
    (rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(1..=3))
}

/// Weighted sum readout so every output coordinate carries a distinct weight.
fn readout(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let n = g.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let wv = g.constant(Tensor::new(g.shape(v), w)?)?;
    let p = g.mul(v, wv)?;
    g.sum(p)
}

fn matmul(rng: &mut SeedRng) -> Result<f64> {
    let (m, k, n) = dims(rng);
    let (a, b) = (random(rng, &[m, k]), random(rng, &[k, n]));
    grad_check_many(|g, v| { let y = g.matmul(v[0], v[1])?; readout(g, y) }, &[a, b])
}

fn matmul_t(rng: &mut SeedRng) -> Result<f64> {
    let (m, k, n) = dims(rng);
    let (a, b) = (random(rng, &[m, k]), random(rng, &[n, k]));
    grad_check_many(
        |g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            let yt = g.transpose(y)?;
            readout(g, yt)
        },
        &[a, b],
    )
}

fn elementwise(rng: &mut SeedRng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let (a, b) = (random(rng, &[m, n]), random(rng, &[m, n]));
    grad_check_many(
        |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let p = g.mul(d, v[1])?;
            let q = g.scale(p, -1.7)?;
            readout(g, q)
        },
        &[a, b],
    )
}

fn biases(rng: &mut SeedRng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let (x, rb, cb) = (random(rng, &[m, n]), random(rng, &[n]), random(rng, &[m]));
    grad_check_many(
        |g, v| {
            let y = g.add_row_bias(v[0], v[1])?;
            let z = g.add_col_bias(y, v[2])?;
            readout(g, z)
        },
        &[x, rb, cb],
    )
}

fn relu(rng: &mut SeedRng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    // keep inputs away from the kink
    let mut x = random(rng, &[m, n]);
    x.data_mut().iter_mut().for_each(|v| if v.abs() < 0.05 { *v += 0.2 });
    grad_check(|g, v| { let y = g.relu(v)?; readout(g, y) }, &x)
}

fn sigmoid(rng: &mut SeedRng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    grad_check(|g, v| { let y = g.sigmoid(v)?; readout(g, y) }, &random(rng, &[m, n]))
}

fn softmax(rng: &mut SeedRng) -> Result<f64> {
    let (a, b, c) = dims(rng);
    let axis = rng.gen_range(0..3);
    grad_check(|g, v| { let y = g.softmax(v, axis)?; readout(g, y) }, &random(rng, &[a, b, c]))
}

fn layer_norm(rng: &mut SeedRng) -> Result<f64> {
    let (m, _, _) = dims(rng);
    let n = rng.gen_range(2..=5);
    let (x, gain, bias) = (random(rng, &[m, n]), random(rng, &[n]), random(rng, &[n]));
    grad_check_many(|g, v| { let y = g.layer_norm(v[0], v[1], v[2])?; readout(g, y) }, &[x, gain, bias])
}

fn structural(rng: &mut SeedRng) -> Result<f64> {
    let (m, n, _) = dims(rng);
    let table = random(rng, &[m + 1, n]);
    let other = random(rng, &[2, n]);
    let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..=m)).collect();
    grad_check_many(
        |g, v| {
            let rows = g.gather(v[0], &ids)?;
            let cat = g.concat_rows(&[rows, v[1]])?;
            let part = g.slice_rows(cat, 1, 4)?;
            let c0 = g.slice_cols(part, 0, 1)?;
            let wide = g.concat_cols(&[part, c0])?;
            let flat = g.reshape(wide, &[4 * (n + 1)])?;
            readout(g, flat)
        },
        &[table, other],
    )
}

fn conv1d(rng: &mut SeedRng) -> Result<f64> {
    let (cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let len = rng.gen_range(3..=8);
    let stride = rng.gen_range(1..=2);
    let (x, w) = (random(rng, &[cin, len]), random(rng, &[cout, cin, 3]));
    grad_check_many(|g, v| { let y = g.conv1d(v[0], v[1], stride, 1)?; readout(g, y) }, &[x, w])
}

fn conv1d_transpose(rng: &mut SeedRng) -> Result<f64> {
    let (cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
    let len = rng.gen_range(2..=6);
    let (x, w) = (random(rng, &[cin, len]), random(rng, &[cin, cout, 3]));
    grad_check_many(|g, v| { let y = g.conv1d_transpose(v[0], v[1], 2, 1, 1)?; readout(g, y) }, &[x, w])
}

fn cross_entropy(rng: &mut SeedRng) -> Result<f64> {
    let (rows, vocab) = (rng.gen_range(2..=4), rng.gen_range(2..=5));
    let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..vocab)).collect();
    let mut targets_with_pad = targets.clone();
    targets_with_pad[0] = 0;
    let logits = random(rng, &[rows, vocab]);
    let a = grad_check(|g, v| g.cross_entropy(v, &targets, None), &logits)?;
    let b = grad_check(|g, v| g.cross_entropy(v, &targets_with_pad, Some(0)).or_else(|_| g.sum(v)), &logits)?;
    Ok(a.max(b))
}

fn l1(rng: &mut SeedRng) -> Result<f64> {
    let n = rng.gen_range(2..=8);
    let (p, q) = (random(rng, &[n]), random(rng, &[n]));
    grad_check_many(|g, v| g.l1_loss(v[0], v[1]), &[p, q])
}

fn mean(rng: &mut SeedRng) -> Result<f64> {
    let n = rng.gen_range(2..=8);
    grad_check(|g, v| { let s = g.mul(v, v)?; g.mean(s) }, &random(rng, &[n]))
}

pub const CASES: [(&str, Case); 15] = [
    ("matmul", matmul),
    ("matmul_t/transpose", matmul_t),
    ("add/sub/mul/scale", elementwise),
    ("row/col bias", biases),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("softmax", softmax),
    ("layer_norm", layer_norm),
    ("gather/concat/slice/reshape", structural),
    ("conv1d", conv1d),
    ("conv1d_transpose", conv1d_transpose),
    ("cross_entropy", cross_entropy),
    ("l1_loss", l1),
    ("mean", mean),
    ("sum", |rng| {
        let (m, n, _) = dims(rng);
        grad_check(|g, v| { let s = g.mul(v, v)?; g.sum(s) }, &random(rng, &[m, n]))
    }),
];

/// Worst error of every case over seeds `0..seeds`.
pub fn run_suite(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    CASES
        .iter()
        .map(|&(name, case)| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                worst = worst.max(case(&mut rng_from(seed))?);
            }
            Ok((name, worst))
        })
        .collect()
}
