mod common;

use laplab_core::attacks::{self, AttackConfig, AttackVariant};
use laplab_core::network::GradRequest;
use laplab_core::{NetSpec, Network, Tensor};
use proptest::prelude::*;

/// Two-class linear model `logits = W x` on 4 inputs, with `W_1 - W_0` fixed.
fn linear_model() -> Network {
    let mut net = Network::build(&NetSpec::mlp(4, &[], 2), 0).unwrap();
    let w = net.layer_mut(1).unwrap();
    w.weight = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.0, -0.4, 0.5, -0.1, 0.2]).unwrap();
    w.bias = Tensor::zeros(&[2]);
    net
}

fn mid_input() -> Tensor {
    Tensor::new(vec![1, 1, 1, 4], vec![0.5, 0.4, 0.6, 0.5]).unwrap()
}

/// For label 0 the loss grows along `W_1 - W_0`.
const ASCENT_SIGN: [f64; 4] = [-1.0, 1.0, -1.0, 1.0];

#[test]
fn n_fgsm_mean_is_the_sign_step() {
    let net = linear_model();
    let x = mid_input();
    let eps = 8.0 / 255.0;
    let cfg = AttackConfig { clamp_input: false, ..AttackConfig::n_fgsm(eps) };
    let n = 10_000;
    let mut sum = [0.0; 4];
    for seed in 0..n {
        let d = attacks::fgsm(&net, &x, &[0], &cfg, seed).unwrap();
        for (s, v) in sum.iter_mut().zip(d.data()) {
            *s += v;
        }
    }
    // eta ~ U(-2ε, 2ε) has standard deviation 4ε/√12.
    let se = 4.0 * eps / 12f64.sqrt() / (n as f64).sqrt();
    for (s, sign) in sum.iter().zip(ASCENT_SIGN) {
        let mean = s / n as f64;
        assert!((mean - eps * sign).abs() <= 3.0 * se, "{mean} vs {}", eps * sign);
    }
}

#[test]
fn pgd_reaches_the_corner_on_a_linear_model() {
    let net = linear_model();
    let x = mid_input();
    let eps = 16.0 / 255.0;
    for seed in 0..10 {
        let d = attacks::pgd(&net, &x, &[0], &AttackConfig::pgd(eps, 20, 2), seed).unwrap();
        for (v, sign) in d.data().iter().zip(ASCENT_SIGN) {
            assert!((v - eps * sign).abs() <= 1e-15, "{v}");
        }
    }
}

#[test]
fn pgd_without_steps_or_init_is_zero() {
    let net = linear_model();
    let cfg = AttackConfig { init_scale: 0.0, ..AttackConfig::pgd(0.1, 0, 1) };
    let d = attacks::pgd(&net, &mid_input(), &[1], &cfg, 3).unwrap();
    assert!(d.data().iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fgsm_family_respects_its_budget(seed in 0u64..10_000, eps_255 in 0.0f64..64.0, which in 0usize..3, clamp in any::<bool>()) {
        let eps = eps_255 / 255.0;
        let net = Network::build(&NetSpec::desk_cnn(1, 16, 2), seed).unwrap();
        let d = common::bars(6, 0.3, seed);
        let variant = [AttackVariant::VFgsm, AttackVariant::RFgsm, AttackVariant::NFgsm][which];
        let cfg = AttackConfig { clamp_input: clamp, ..AttackConfig::fgsm_preset(variant, eps).unwrap() };
        let delta = attacks::fgsm(&net, &d.images, &d.labels, &cfg, seed).unwrap();
        let limit = if variant == AttackVariant::NFgsm { (cfg.init_scale + 1.0) * eps } else { eps };
        prop_assert!(delta.norm_linf() <= limit * (1.0 + 1e-12));
        if clamp {
            let adv = d.images.add(&delta).unwrap();
            prop_assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pgd_stays_in_ball_and_box(seed in 0u64..10_000, eps_255 in 0.0f64..64.0, steps in 0usize..4, restarts in 1usize..3) {
        let eps = eps_255 / 255.0;
        let net = Network::build(&NetSpec::desk_cnn(1, 16, 2), seed).unwrap();
        let d = common::bars(6, 0.3, seed);
        let delta = attacks::pgd(&net, &d.images, &d.labels, &AttackConfig::pgd(eps, steps, restarts), seed).unwrap();
        prop_assert!(delta.norm_linf() <= eps);
        let adv = d.images.add(&delta).unwrap();
        prop_assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn attacks_are_deterministic() {
    let net = Network::build(&NetSpec::desk_cnn(1, 16, 2), 4).unwrap();
    let d = common::bars(20, 0.3, 4);
    for cfg in [AttackConfig::r_fgsm(0.1), AttackConfig::n_fgsm(0.1), AttackConfig::pgd(0.1, 3, 2)] {
        let a = attacks::perturb(&net, &d.images, &d.labels, &cfg, 9).unwrap();
        let b = attacks::perturb(&net, &d.images, &d.labels, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn zero_budget_gives_natural_accuracy() {
    let d = common::bars(300, 0.3, 8);
    for seed in 0..5 {
        let net = Network::build(&NetSpec::desk_cnn(1, 16, 2), seed).unwrap();
        let natural = attacks::evaluate(&net, &d, &AttackConfig::none(), 0).unwrap();
        for cfg in [AttackConfig::v_fgsm(0.0), AttackConfig::pgd(0.0, 5, 2)] {
            assert_eq!(attacks::evaluate(&net, &d, &cfg, 1).unwrap(), natural);
        }
        let attacked = attacks::evaluate(&net, &d, &AttackConfig::pgd(16.0 / 255.0, 5, 1), 1).unwrap();
        assert!(attacked <= natural);
    }
}

#[test]
fn random_networks_sit_at_chance() {
    let d = common::bars(1000, 0.3, 12);
    let accs: Vec<f64> = (0..10)
        .map(|seed| {
            let net = Network::build(&NetSpec::desk_cnn(1, 16, 2), 500 + seed).unwrap();
            attacks::evaluate(&net, &d, &AttackConfig::none(), 0).unwrap()
        })
        .collect();
    // A single untrained net can lean on structure in the images; the seed average cannot.
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    println!("untrained accuracies {accs:?}, mean {mean:.4}");
    assert!((0.4..=0.6).contains(&mean), "{accs:?}");
}

/// Measured over seeds 0..20 with 64 examples each: 1265 of 1280.
const PGD_DOMINANCE_RATE: f64 = 1265.0 / 1280.0;

#[test]
fn pgd_loss_dominates_fgsm_loss() {
    let eps = 8.0 / 255.0;
    let (mut wins, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let net = Network::build(&NetSpec::desk_cnn(1, 16, 2), seed).unwrap();
        let d = common::bars(64, 0.3, 100 + seed);
        let loss_at = |delta: &Tensor| net.evaluate_batch(&d.images.add(delta).unwrap(), &d.labels, GradRequest::None).unwrap().per_example_loss;
        let f = loss_at(&attacks::fgsm(&net, &d.images, &d.labels, &AttackConfig::v_fgsm(eps), seed).unwrap());
        let p = loss_at(&attacks::pgd(&net, &d.images, &d.labels, &AttackConfig::pgd(eps, 10, 1), seed).unwrap());
        wins += p.iter().zip(&f).filter(|(p, f)| p >= f).count();
        total += p.len();
    }
    let rate = wins as f64 / total as f64;
    println!("PGD-10 >= V-FGSM loss on {wins}/{total} examples ({rate:.4})");
    assert!(rate >= 0.95);
    assert!((rate - PGD_DOMINANCE_RATE).abs() <= 1e-12, "rate moved: {rate}");
}
