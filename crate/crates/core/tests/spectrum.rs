mod common;

use laplab_core::diagnostics::spectrum::{self, singular_values};
use laplab_core::{NetSpec, Network};
use proptest::prelude::*;

#[test]
fn matches_gram_eigenvalues() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let (m, rows, cols) = common::random_matrix(seed);
        let got = singular_values(&m, rows, cols);
        let err = common::spectrum_error(&got, &common::gram_singular_values(&m, rows, cols));
        assert!(err <= 1e-8, "seed {seed} ({rows}x{cols}): {err}");
        worst = worst.max(err);
    }
    println!("worst relative error {worst:e}");
}

#[test]
fn transpose_has_the_same_spectrum() {
    for seed in 0..20 {
        let (m, rows, cols) = common::random_matrix(seed);
        let mut t = vec![0.0; m.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = m[r * cols + c];
            }
        }
        let err = common::spectrum_error(&singular_values(&t, cols, rows), &singular_values(&m, rows, cols));
        assert!(err <= 1e-10, "{err}");
    }
}

#[test]
fn scaling_scales_the_spectrum() {
    let (m, rows, cols) = common::random_matrix(7);
    let scaled: Vec<f64> = m.iter().map(|v| -3.0 * v).collect();
    let want: Vec<f64> = singular_values(&m, rows, cols).iter().map(|s| 3.0 * s).collect();
    assert!(common::spectrum_error(&singular_values(&scaled, rows, cols), &want) <= 1e-10);
}

#[test]
fn desk_layers_have_min_side_many_values() {
    let net = Network::build(&NetSpec::desk_cnn(1, 16, 2), 1).unwrap();
    let counts: Vec<usize> = (1..=4).map(|l| spectrum::singular_spectrum(&net, l).unwrap().singular_values.len()).collect();
    assert_eq!(counts, vec![8, 16, 64, 2]);
    for l in 1..=4 {
        let r = spectrum::singular_spectrum(&net, l).unwrap();
        let frob: f64 = r.singular_values.iter().map(|s| s * s).sum::<f64>().sqrt();
        let w = net.layer(l).unwrap().weight.norm_l2();
        assert!((frob - w).abs() <= 1e-10 * w);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn permuting_rows_and_columns_keeps_the_spectrum(seed in 0u64..100_000, shuffle in 0u64..1000) {
        use rand::seq::SliceRandom;
        let (m, rows, cols) = common::random_matrix(seed);
        let mut r = laplab_core::rng::rng(shuffle);
        let mut pr: Vec<usize> = (0..rows).collect();
        let mut pc: Vec<usize> = (0..cols).collect();
        pr.shuffle(&mut r);
        pc.shuffle(&mut r);
        let p: Vec<f64> = pr.iter().flat_map(|&i| pc.iter().map(move |&j| (i, j))).map(|(i, j)| m[i * cols + j]).collect();
        let err = common::spectrum_error(&singular_values(&p, rows, cols), &singular_values(&m, rows, cols));
        prop_assert!(err <= 1e-9, "{}", err);
    }
}
