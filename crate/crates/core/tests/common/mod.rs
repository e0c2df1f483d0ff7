//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use asc_core::losses::{combined_loss, one_hot, triplet_loss, TripletBatch};
use asc_core::model::ModelSpec;
use asc_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_INSTANCES: usize = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Uniform values whose magnitude is at least `gap` (keeps ReLU away from its kink).
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.random_range(gap..1.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Builds a scalar from input handles on a fresh graph.
pub type Objective<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

/// Reduce any tensor to a scalar with fixed random weights, so every output
/// element contributes a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn eval(f: &Objective<'_>, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Worst norm-wise relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` between
/// reverse-mode and central-difference gradients over all inputs.
pub fn gradient_error(f: &Objective<'_>, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (eval(f, &plus) - eval(f, &minus)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic[i].iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / (na + nn).max(1e-12));
    }
    worst
}

pub const PRIMITIVES: [&str; 10] =
    ["conv2d", "factorized", "dense", "relu", "maxpool", "batchnorm", "softmax", "cross_entropy", "triplet", "combined"];

/// One random instance of `primitive`: the objective and its inputs.
pub fn instance(primitive: &str, seed: u64) -> (Box<Objective<'static>>, Vec<Tensor<f64>>) {
    let mut r = rng(seed);
    match primitive {
        "conv2d" => {
            let (n, ci, co) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
            let (kh, kw) = (r.random_range(1..4), r.random_range(1..4));
            let (h, w) = (r.random_range(kh..kh + 4), r.random_range(kw..kw + 4));
            let stride = (r.random_range(1..3), r.random_range(1..3));
            let pad = (r.random_range(0..2), r.random_range(0..2));
            let x = uniform(&mut r, &[n, ci, h, w], -1.0, 1.0);
            let wt = uniform(&mut r, &[co, ci, kh, kw], -1.0, 1.0);
            let b = uniform(&mut r, &[co], -1.0, 1.0);
            let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
            let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
            let rw = uniform(&mut r, &[n, co, oh, ow], -1.0, 1.0);
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                weighted_sum(g, y, &rw)
            };
            (Box::new(f), vec![x, wt, b])
        }
        "factorized" => {
            let (n, ci, co) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
            let mid = ci.min(co);
            let k = [1, 3, 5][r.random_range(0..3)];
            let (h, w) = (r.random_range(2..6), r.random_range(2..6));
            let x = uniform(&mut r, &[n, ci, h, w], -1.0, 1.0);
            let v = uniform(&mut r, &[mid, ci, k, 1], -1.0, 1.0);
            let hw = uniform(&mut r, &[co, mid, 1, k], -1.0, 1.0);
            let b = uniform(&mut r, &[co], -1.0, 1.0);
            let rw = uniform(&mut r, &[n, co, h, w], -1.0, 1.0);
            let p = k / 2;
            let f = move |g: &mut Graph<f64>, vs: &[Var]| {
                let m = g.conv2d(vs[0], vs[1], None, (1, 1), (p, 0)).unwrap();
                let y = g.conv2d(m, vs[2], Some(vs[3]), (1, 1), (0, p)).unwrap();
                weighted_sum(g, y, &rw)
            };
            (Box::new(f), vec![x, v, hw, b])
        }
        "dense" => {
            let (n, i, o) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..6));
            let x = uniform(&mut r, &[n, i], -1.0, 1.0);
            let w = uniform(&mut r, &[o, i], -1.0, 1.0);
            let b = uniform(&mut r, &[o], -1.0, 1.0);
            let rw = uniform(&mut r, &[n, o], -1.0, 1.0);
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.dense(v[0], v[1], Some(v[2])).unwrap();
                weighted_sum(g, y, &rw)
            };
            (Box::new(f), vec![x, w, b])
        }
        "relu" => {
            let shape = [r.random_range(1..4), r.random_range(1..6)];
            let x = away_from_zero(&mut r, &shape, 1e-2);
            let rw = uniform(&mut r, &shape, -1.0, 1.0);
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, &rw)
            };
            (Box::new(f), vec![x])
        }
        "maxpool" => {
            let (n, c) = (r.random_range(1..3), r.random_range(1..3));
            let (ph, pw) = (r.random_range(1..3), r.random_range(1..3));
            let (h, w) = (ph * r.random_range(1..4), pw * r.random_range(1..4));
            // distinct values on a 0.01 grid, shuffled: no near-ties inside a window
            let count = n * c * h * w;
            let mut vals: Vec<f64> = (0..count).map(|i| i as f64 * 0.01).collect();
            rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), &mut r);
            let x = Tensor::from_f64(vec![n, c, h, w], &vals).unwrap();
            let rw = uniform(&mut r, &[n, c, h / ph, w / pw], -1.0, 1.0);
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.maxpool2d(v[0], (ph, pw)).unwrap();
                weighted_sum(g, y, &rw)
            };
            (Box::new(f), vec![x])
        }
        "batchnorm" => {
            let (n, c) = (r.random_range(2..4), r.random_range(1..4));
            let (h, w) = (r.random_range(1..4), r.random_range(2..4));
            let x = uniform(&mut r, &[n, c, h, w], -2.0, 2.0);
            let gamma = uniform(&mut r, &[c], 0.5, 1.5);
            let beta = uniform(&mut r, &[c], -1.0, 1.0);
            let rw = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let (y, _) = g.batchnorm2d_train(v[0], v[1], v[2]).unwrap();
                weighted_sum(g, y, &rw)
            };
            (Box::new(f), vec![x, gamma, beta])
        }
        "softmax" => {
            let shape = [r.random_range(1..4), r.random_range(2..6)];
            let z = uniform(&mut r, &shape, -3.0, 3.0);
            let rw = uniform(&mut r, &shape, -1.0, 1.0);
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let y = g.softmax(v[0]).unwrap();
                weighted_sum(g, y, &rw)
            };
            (Box::new(f), vec![z])
        }
        "cross_entropy" => {
            // softmax → CE on probabilities, with soft targets
            let (n, c) = (r.random_range(1..4), r.random_range(2..6));
            let z = uniform(&mut r, &[n, c], -3.0, 3.0);
            let mut t: Vec<f64> = (0..n * c).map(|_| r.random_range(0.0..1.0)).collect();
            for row in t.chunks_mut(c) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let p = g.softmax(v[0]).unwrap();
                g.cross_entropy(p, &t).unwrap()
            };
            (Box::new(f), vec![z])
        }
        "triplet" => {
            let (e, batch, margin) = active_triplets(&mut r);
            let f = move |g: &mut Graph<f64>, v: &[Var]| triplet_loss(g, v[0], &batch, margin).unwrap();
            (Box::new(f), vec![e])
        }
        "combined" => {
            // CE of a dense classifier plus γ·triplet on its input rows
            let (e, batch, margin) = active_triplets(&mut r);
            let (d, c) = (e.shape()[1], r.random_range(2..5));
            let labels: Vec<usize> = (0..e.shape()[0]).map(|_| r.random_range(0..c)).collect();
            let targets = one_hot(&labels, c);
            let w = uniform(&mut r, &[c, d], -1.0, 1.0);
            let gamma = r.random_range(0.5..10.0);
            let f = move |g: &mut Graph<f64>, v: &[Var]| {
                let logits = g.dense(v[0], v[1], None).unwrap();
                let ce = g.softmax_cross_entropy(logits, &targets).unwrap();
                let t = triplet_loss(g, v[0], &batch, margin).unwrap();
                combined_loss(g, ce, t, gamma).unwrap()
            };
            (Box::new(f), vec![e, w])
        }
        other => panic!("unknown primitive {other}"),
    }
}

/// Embedding rows and triplets whose hinge values all sit clear of 0.
fn active_triplets(r: &mut ChaCha8Rng) -> (Tensor<f64>, TripletBatch, f64) {
    loop {
        let (n, d) = (r.random_range(3..7), r.random_range(1..5));
        let e = uniform(r, &[n, d], -1.0, 1.0);
        let margin = r.random_range(0.0..1.0);
        let mut batch = TripletBatch::default();
        for _ in 0..r.random_range(1..5) {
            let a = r.random_range(0..n);
            let p = (a + r.random_range(1..n)) % n;
            let q = (a + r.random_range(1..n)) % n;
            batch.anchors.push(a);
            batch.positives.push(p);
            batch.negatives.push(q);
            batch.fallback.push(false);
        }
        let row = |i: usize| &e.data()[i * d..(i + 1) * d];
        let sq = |i: usize, j: usize| row(i).iter().zip(row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let clear = batch.triples().iter().all(|&(a, p, q)| (sq(a, p) - sq(a, q) + margin).abs() > 1e-3);
        let any_active = batch.triples().iter().any(|&(a, p, q)| sq(a, p) - sq(a, q) + margin > 0.0);
        if clear && any_active {
            return (e, batch, margin);
        }
    }
}

/// Worst gradient error of `primitive` over `instances` random instances.
pub fn check_primitive(primitive: &str, instances: usize) -> f64 {
    (0..instances as u64)
        .map(|s| {
            let (f, inputs) = instance(primitive, 1000 + s);
            gradient_error(f.as_ref(), &inputs)
        })
        .fold(0.0, f64::max)
}

/// A small model for tests that train: 40 mel bins in 3 bands, narrow convs.
pub fn small_spec(num_classes: usize) -> ModelSpec {
    ModelSpec {
        mel_bins: 40,
        sub_size: 20,
        overlap: 10,
        kernel_k: 7,
        channels: [2, 8, 8, 16],
        per_band_hidden: 32,
        global_hidden: 32,
        num_classes,
        ..ModelSpec::logmel40()
    }
}
