#![allow(dead_code)]

use laplab_core::autodiff::{Bindings, CompGraph, NodeId};
use laplab_core::data::{self, Dataset, SyntheticKind};
use laplab_core::rng;
use laplab_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal(shape: &[usize], scale: f64, r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub fn labels(n: usize, k: usize, r: &mut rng::Rng) -> Vec<usize> {
    (0..n).map(|_| r.gen_range(0..k)).collect()
}

pub fn label_tensor(labels: &[usize]) -> Tensor {
    Tensor::from_vec(labels.iter().map(|&y| y as f64).collect())
}

/// A random conv-relu-pool-conv-relu-flatten-dense-relu-dense graph with
/// summed cross-entropy on a random batch. Input and parameter leaves.
pub struct RandomCnn {
    pub graph: CompGraph,
    pub bindings: Bindings,
    pub x: NodeId,
    pub y: NodeId,
    pub params: Vec<NodeId>,
}

pub fn random_cnn(seed: u64) -> RandomCnn {
    let mut r = rng::rng(seed);
    let n = r.gen_range(1..=3);
    let c = r.gen_range(1..=2);
    let hw = [6, 7, 8][r.gen_range(0..3)];
    let (c1, c2) = (r.gen_range(2..=3), r.gen_range(2..=3));
    let (pad1, stride2) = (r.gen_range(0..=1), r.gen_range(1..=2));
    let hidden = r.gen_range(3..=5);
    let k = r.gen_range(2..=4);

    let h1 = hw + 2 * pad1 - 2;
    let p1 = h1 / 2;
    let h2 = (p1 + 2 - 3) / stride2 + 1;
    let flat = c2 * h2 * h2;

    let mut g = CompGraph::new();
    let x = g.input("x");
    let y = g.constant("y");
    let w1 = g.param("w1");
    let b1 = g.param("b1");
    let w2 = g.param("w2");
    let b2 = g.param("b2");
    let w3 = g.param("w3");
    let b3 = g.param("b3");
    let w4 = g.param("w4");
    let b4 = g.param("b4");
    let h = g.conv2d(x, w1, b1, 1, pad1);
    let h = g.relu(h);
    let h = g.avg_pool2(h);
    let h = g.conv2d(h, w2, b2, stride2, 1);
    let h = g.relu(h);
    let h = g.flatten(h);
    let h = g.dense(h, w3, b3);
    let h = g.relu(h);
    let logits = g.dense(h, w4, b4);
    g.softmax_xent(logits, y);

    let ys = labels(n, k, &mut r);
    let bindings = Bindings::new()
        .with(x, normal(&[n, c, hw, hw], 1.0, &mut r))
        .with(y, label_tensor(&ys))
        .with(w1, normal(&[c1, c, 3, 3], 0.5, &mut r))
        .with(b1, normal(&[c1], 0.1, &mut r))
        .with(w2, normal(&[c2, c1, 3, 3], 0.5, &mut r))
        .with(b2, normal(&[c2], 0.1, &mut r))
        .with(w3, normal(&[hidden, flat], 0.5, &mut r))
        .with(b3, normal(&[hidden], 0.1, &mut r))
        .with(w4, normal(&[k, hidden], 0.5, &mut r))
        .with(b4, normal(&[k], 0.1, &mut r));
    RandomCnn { graph: g, bindings, x, y, params: vec![w1, b1, w2, b2, w3, b3, w4, b4] }
}

pub fn bars(n: usize, noise: f64, seed: u64) -> Dataset {
    data::gen_synthetic(SyntheticKind::BarsVsCheckers, n, 16, noise, seed).unwrap()
}

/// Singular values through the eigenvalues of the smaller Gram matrix,
/// computed by nalgebra. Descending.
pub fn gram_singular_values(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let a = nalgebra::DMatrix::from_row_slice(rows, cols, m);
    let gram = if rows >= cols { a.transpose() * &a } else { &a * a.transpose() };
    let mut sv: Vec<f64> = gram.symmetric_eigenvalues().iter().map(|&e| e.max(0.0).sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Largest relative disagreement between two spectra of equal length.
pub fn spectrum_error(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(a, b)| (a - b).abs() / b.abs().max(1e-300)).fold(0.0, f64::max)
}

/// One random matrix per seed, each side in 1..=32.
pub fn random_matrix(seed: u64) -> (Vec<f64>, usize, usize) {
    let mut r = rng::rng(seed);
    let rows = r.gen_range(1..=32);
    let cols = r.gen_range(1..=32);
    let m = normal(&[rows, cols], 1.0, &mut r).into_data();
    (m, rows, cols)
}

/// Desk CNN after `epochs` of natural training on `n` bars images.
pub fn trained_desk(n: usize, epochs: usize, seed: u64) -> (laplab_core::Network, Dataset, Dataset) {
    use laplab_core::attacks::AttackConfig;
    use laplab_core::perturb::PerturbSchedule;
    use laplab_core::trainer::{self, LrSchedule, TrainConfig};
    let train = bars(n, 0.3, seed);
    let test = bars(n / 2, 0.3, seed + 1000);
    let mut net = laplab_core::Network::build(&laplab_core::NetSpec::desk_cnn(1, 16, 2), seed).unwrap();
    let mut cfg = TrainConfig::standard(epochs, LrSchedule::Cyclic { max_lr: 0.05, peak_epoch: epochs as f64 / 2.0 }, 8.0 / 255.0, seed);
    cfg.eval_pgd = AttackConfig::pgd(8.0 / 255.0, 1, 1);
    cfg.final_eval = None;
    trainer::train(&mut net, &train, &test, &cfg, &AttackConfig::none(), &PerturbSchedule::none(4)).unwrap();
    (net, train, test)
}
