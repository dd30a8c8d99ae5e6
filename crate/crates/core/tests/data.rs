mod common;

use laplab_core::attacks::{self, AttackConfig};
use laplab_core::data::{self, gen_synthetic, SyntheticKind};
use laplab_core::perturb::PerturbSchedule;
use laplab_core::trainer::{self, LrSchedule, TrainConfig};
use laplab_core::{Error, NetSpec, Network, Tensor};
use proptest::prelude::*;

fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = data::IDX_IMAGE_MAGIC.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = data::IDX_LABEL_MAGIC.to_be_bytes().to_vec();
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn idx_files_load_and_scale() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lbl.idx"));
    std::fs::write(&ip, idx_images(1, 2, 2, &[0, 255, 128, 64])).unwrap();
    std::fs::write(&lp, idx_labels(&[1])).unwrap();
    let d = data::load_idx(&ip, &lp, None).unwrap();
    assert_eq!(d.images.shape(), &[1, 1, 2, 2]);
    assert_eq!(d.images.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    assert_eq!(d.labels, vec![1]);
}

#[test]
fn idx_errors_are_distinct() {
    let pixels = vec![7u8; 10 * 4];
    let images = idx_images(10, 2, 2, &pixels);
    let labels = idx_labels(&[0; 9]);
    assert!(matches!(data::idx_dataset(&images, &labels, None), Err(Error::CountMismatch { images: 10, labels: 9 })));

    let labels = idx_labels(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
    assert!(matches!(data::idx_dataset(&images, &labels, Some(5)), Err(Error::LabelOutOfRange { index: 5, label: 5, classes: 5 })));
    assert!(data::idx_dataset(&images, &labels, Some(10)).is_ok());

    assert!(matches!(data::idx_dataset(&labels, &labels, None), Err(Error::IdxMagic { .. })));
    assert!(matches!(data::idx_dataset(&images[..images.len() - 1], &labels, None), Err(Error::Truncated(_))));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(data::load_idx(dir.path().join("nope"), dir.path().join("nope"), None), Err(Error::Io(_))));
}

#[test]
fn csv_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    std::fs::write(&p, "label,p0,p1,p2,p3\n1,0,0.5,1,0.25\n0,1,1,1,1\n").unwrap();
    let d = data::load_csv(&p, Some([1, 2, 2]), None).unwrap();
    assert_eq!(d.labels, vec![1, 0]);
    assert_eq!(d.images.row(0).data(), &[0.0, 0.5, 1.0, 0.25]);
    std::fs::write(&p, "label,p0\n0,1.5\n").unwrap();
    assert!(data::load_csv(&p, None, None).is_err());
}

#[test]
fn generators_are_deterministic_balanced_and_bounded() {
    for kind in [SyntheticKind::BarsVsCheckers, SyntheticKind::GaussianBlobs] {
        let a = gen_synthetic(kind, 400, 16, 0.3, 9).unwrap();
        assert_eq!(a, gen_synthetic(kind, 400, 16, 0.3, 9).unwrap());
        assert_ne!(a, gen_synthetic(kind, 400, 16, 0.3, 10).unwrap());
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let k = kind.num_classes();
        for c in 0..k {
            assert_eq!(a.labels.iter().filter(|&&y| y == c).count(), 400 / k);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn augmentation_keeps_range_shape_and_histogram_bounds(seed in any::<u64>(), n in 1usize..6, c in 1usize..3, side in 3usize..9) {
        let mut r = laplab_core::rng::rng(seed);
        let raw = common::normal(&[n, c, side, side], 1.0, &mut r);
        let batch = raw.map(|v| 1.0 / (1.0 + (-v).exp()));
        let out = data::augment(&batch, seed);
        prop_assert_eq!(out.shape(), batch.shape());
        prop_assert_eq!(&out, &data::augment(&batch, seed));
        let per = c * side * side;
        for i in 0..n {
            let src = &batch.data()[i * per..(i + 1) * per];
            let (lo, hi) = src.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            // Every output pixel is copied from the same image.
            prop_assert!(out.data()[i * per..(i + 1) * per].iter().all(|v| *v >= lo && *v <= hi && src.contains(v)));
        }
    }
}

#[test]
fn augmentation_moves_something() {
    let d = common::bars(16, 0.3, 1);
    let out = data::augment(&d.images, 3);
    assert_ne!(out, d.images);
    let unchanged = Tensor::full(&[4, 1, 16, 16], 0.5);
    assert_eq!(data::augment(&unchanged, 3), unchanged);
}

/// Natural test accuracy after 10 standard epochs on noise 0.5: 498 of 500.
const CALIBRATED_ACCURACY: f64 = 498.0 / 500.0;

#[test]
fn noisy_bars_are_learnable() {
    let train = gen_synthetic(SyntheticKind::BarsVsCheckers, 2000, 16, 0.5, 1).unwrap();
    let test = gen_synthetic(SyntheticKind::BarsVsCheckers, 500, 16, 0.5, 1001).unwrap();
    let mut net = Network::build(&NetSpec::desk_cnn(1, 16, 2), 1).unwrap();
    let mut cfg = TrainConfig::standard(10, LrSchedule::Cyclic { max_lr: 0.2, peak_epoch: 5.0 }, 8.0 / 255.0, 1);
    cfg.eval_pgd = AttackConfig::pgd(8.0 / 255.0, 1, 1);
    cfg.final_eval = None;
    trainer::train(&mut net, &train, &test, &cfg, &AttackConfig::none(), &PerturbSchedule::none(4)).unwrap();
    let acc = attacks::evaluate(&net, &test, &AttackConfig::none(), 0).unwrap();
    println!("natural test accuracy {acc}");
    assert!(acc >= 0.9);
    assert_eq!(acc, CALIBRATED_ACCURACY);
}
