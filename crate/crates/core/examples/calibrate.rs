//! Prints per-epoch metrics for one training run on bars-vs-checkers.
//!
//! usage: calibrate <mode> <beta> <eps_255> <epochs> <seed> [noise] [max_lr]

use laplab_core::attacks::AttackConfig;
use laplab_core::data::{gen_synthetic, SyntheticKind};
use laplab_core::perturb::{PerturbMode, PerturbSchedule};
use laplab_core::trainer::{train_with, LrSchedule, TrainConfig};
use laplab_core::{NetSpec, Network};

fn main() -> laplab_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mode: PerturbMode = serde_json::from_str(&format!("\"{}\"", args.get(1).map_or("none", String::as_str))).expect("mode");
    let beta: f64 = args.get(2).map_or(0.0, |s| s.parse().expect("beta"));
    let eps = args.get(3).map_or(64.0, |s| s.parse().expect("eps")) / 255.0;
    let epochs: usize = args.get(4).map_or(30, |s| s.parse().expect("epochs"));
    let seed: u64 = args.get(5).map_or(1, |s| s.parse().expect("seed"));
    let noise: f64 = args.get(6).map_or(0.3, |s| s.parse().expect("noise"));
    let max_lr: f64 = args.get(7).map_or(0.2, |s| s.parse().expect("max_lr"));

    let train = gen_synthetic(SyntheticKind::BarsVsCheckers, 2000, 16, noise, seed)?;
    let test = gen_synthetic(SyntheticKind::BarsVsCheckers, 500, 16, noise, seed + 1000)?;
    let mut net = Network::build(&NetSpec::desk_cnn(1, 16, 2), seed)?;
    let mut cfg = TrainConfig::standard(epochs, LrSchedule::Cyclic { max_lr, peak_epoch: epochs as f64 / 2.0 }, eps, seed);
    cfg.final_eval = None;
    let schedule = PerturbSchedule::new(mode, beta, 0.3, net.num_layers())?;
    let h = train_with(&mut net, &train, &test, &cfg, &AttackConfig::v_fgsm(eps), &schedule, |r, _| {
        println!("{:>2} lr {:.3} loss {:.4} nat {:.3} fgsm {:.3} pgd {:.3} ({:.1}s)", r.epoch, r.lr, r.train_loss, r.nat_acc, r.fgsm_acc, r.pgd_acc, r.wall_s);
        Ok(())
    })?;
    println!("co: {:?}", h.co_event);
    let g = net.evaluate_batch(&test.images.slice_rows(0, 256), &test.labels[..256], laplab_core::network::GradRequest::Params)?;
    for (l, lg) in net.layers().iter().zip(g.param_grads.unwrap()) {
        println!(
            "{} |w| {:.3} |b| {:.3} |gw| {:.3e} |gb| {:.3e} b {:?}",
            l.name,
            l.weight.norm_l2(),
            l.bias.norm_l2(),
            lg.weight.norm_l2(),
            lg.bias.norm_l2(),
            &l.bias.data()[..l.bias.numel().min(8)]
        );
    }
    Ok(())
}
