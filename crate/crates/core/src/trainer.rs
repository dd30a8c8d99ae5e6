//! Adversarial training loop, optimizer, learning-rate schedules and the
//! catastrophic-overfitting detector.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackVariant};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::network::{GradRequest, LayerGrad, Network};
use crate::perturb::{self, PerturbMode, PerturbSchedule};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Triangle: 0 → `max_lr` on `[0, peak_epoch]`, then back to 0 at the last epoch.
    Cyclic { max_lr: f64, peak_epoch: f64 },
    /// `initial_lr` divided by `decay` once per milestone passed.
    Piecewise { initial_lr: f64, milestones: Vec<f64>, decay: f64 },
}

impl LrSchedule {
    /// Learning rate at fractional epoch `t` of an `epochs`-long run. Values of
    /// `t` past the horizon clamp to the final value.
    pub fn lr_at(&self, t: f64, epochs: usize) -> f64 {
        let horizon = epochs as f64;
        let t = t.clamp(0.0, horizon);
        match *self {
            LrSchedule::Cyclic { max_lr, peak_epoch } => {
                if t <= peak_epoch {
                    if peak_epoch == 0.0 {
                        max_lr
                    } else {
                        max_lr * t / peak_epoch
                    }
                } else if horizon <= peak_epoch {
                    max_lr
                } else {
                    max_lr * (horizon - t) / (horizon - peak_epoch)
                }
            }
            LrSchedule::Piecewise { initial_lr, ref milestones, decay } => {
                let passed = milestones.iter().filter(|&&m| t >= m).count();
                initial_lr / decay.powi(passed as i32)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Cyclic { max_lr, peak_epoch } => {
                if !(*max_lr >= 0.0) || !(*peak_epoch >= 0.0) {
                    return Err(Error::InvalidConfig("cyclic schedule needs max_lr >= 0 and peak_epoch >= 0".into()));
                }
            }
            LrSchedule::Piecewise { initial_lr, milestones, decay } => {
                if !(*initial_lr >= 0.0) || !(*decay > 0.0) {
                    return Err(Error::InvalidConfig("piecewise schedule needs initial_lr >= 0 and decay > 0".into()));
                }
                if milestones.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::InvalidConfig("piecewise milestones must be sorted".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub augment: bool,
    /// Single-step attack reported as `fgsm_acc` each epoch.
    pub eval_fgsm: AttackConfig,
    /// Multi-step attack reported as `pgd_acc` each epoch.
    pub eval_pgd: AttackConfig,
    /// Attack for the end-of-run robust accuracy; `None` skips it.
    #[serde(default)]
    pub final_eval: Option<AttackConfig>,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Momentum 0.9, weight decay 5e-4, batch 128, V-FGSM(ε) and PGD-10 per
    /// epoch, PGD-50-10 at the end.
    pub fn standard(epochs: usize, lr_schedule: LrSchedule, epsilon: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 128,
            lr_schedule,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed,
            augment: true,
            eval_fgsm: AttackConfig::v_fgsm(epsilon),
            eval_pgd: AttackConfig::pgd(epsilon, 10, 1),
            final_eval: Some(AttackConfig::pgd(epsilon, 50, 10)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        self.lr_schedule.validate()?;
        self.eval_fgsm.validate()?;
        self.eval_pgd.validate()?;
        if let Some(f) = &self.final_eval {
            f.validate()?;
        }
        Ok(())
    }
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<LayerGrad>,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Self {
        let velocity = net.layers().iter().map(|l| LayerGrad { weight: Tensor::zeros(l.weight.shape()), bias: Tensor::zeros(l.bias.shape()) }).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn velocity(&self) -> &[LayerGrad] {
        &self.velocity
    }

    pub fn step(&mut self, net: &mut Network, grads: &[LayerGrad], lr: f64) -> Result<()> {
        if grads.len() != net.num_layers() || self.velocity.len() != net.num_layers() {
            return Err(Error::InvalidShape("optimizer state does not match the network".into()));
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((layer, g), v) in net.layers_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            for (w, g, v) in [(&mut layer.weight, &g.weight, &mut v.weight), (&mut layer.bias, &g.bias, &mut v.bias)] {
                w.check_same_shape(g)?;
                for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *v = mu * *v + (g + wd * *w);
                    *w -= lr * *v;
                }
            }
        }
        Ok(())
    }
}

/// What one training step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean loss at the point the update gradient was taken.
    pub loss: f64,
    /// Forward/backward passes spent.
    pub passes: usize,
}

fn weight_grads(grads: &[LayerGrad]) -> Vec<Tensor> {
    grads.iter().map(|g| g.weight.clone()).collect()
}

fn attack_passes(cfg: &AttackConfig) -> usize {
    match cfg.variant {
        AttackVariant::None => 0,
        AttackVariant::Pgd => cfg.steps * cfg.restarts + usize::from(cfg.restarts > 1) * cfg.restarts,
        _ => 1,
    }
}

/// One adversarial training step on `(x, labels)`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    schedule: &PerturbSchedule,
    opt: &mut Sgd,
    lr: f64,
    seed: u64,
) -> Result<StepOutcome> {
    if schedule.num_layers() != net.num_layers() {
        return Err(Error::InvalidConfig(format!("schedule covers {} layers, network has {}", schedule.num_layers(), net.num_layers())));
    }
    let mode = schedule.mode;
    let joint = matches!(mode, PerturbMode::LapJoint | PerturbMode::LapRandom | PerturbMode::LapInf);
    let (delta, mut passes, restore) = if joint {
        if !attack.variant.is_fgsm() {
            return Err(Error::InvalidConfig(format!("{mode:?} shares one backward with a single-step attack, got {:?}", attack.variant)));
        }
        let eta = attacks::fgsm_init(x, attack, seed);
        let eval = net.evaluate_batch(&x.add(&eta)?, labels, GradRequest::Both)?;
        let delta = attacks::fgsm_step(x, &eta, eval.input_grad.as_ref().expect("requested"), attack);
        let nu = perturb::compute_nu(&weight_grads(eval.param_grads.as_ref().expect("requested")), net, schedule, seed)?;
        perturb::apply(net, &nu)?;
        (delta, 1, None)
    } else {
        let delta = attacks::perturb(net, x, labels, attack, seed)?;
        let mut passes = attack_passes(attack);
        let mut restore = None;
        if mode != PerturbMode::None {
            let adv = x.add(&delta)?;
            let eval = net.evaluate_batch(&adv, labels, GradRequest::Params)?;
            passes += 1;
            let nu = perturb::compute_nu(&weight_grads(eval.param_grads.as_ref().expect("requested")), net, schedule, seed)?;
            let applied = perturb::apply(net, &nu)?;
            if mode == PerturbMode::AwpOriginal {
                restore = Some(applied);
            }
        }
        (delta, passes, restore)
    };
    let adv = if attack.variant == AttackVariant::None { x.clone() } else { x.add(&delta)? };
    let eval = net.evaluate_batch(&adv, labels, GradRequest::Params)?;
    passes += 1;
    opt.step(net, eval.param_grads.as_ref().expect("requested"), lr)?;
    if let Some(applied) = restore {
        perturb::subtract(net, applied)?;
    }
    Ok(StepOutcome { loss: eval.loss, passes })
}

/// Metrics for one epoch; field names are the JSON-lines keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub nat_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub wall_s: f64,
}

impl MetricsRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_metrics(&self, other: &MetricsRecord) -> bool {
        self.epoch == other.epoch
            && self.lr.to_bits() == other.lr.to_bits()
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.nat_acc == other.nat_acc
            && self.fgsm_acc == other.fgsm_acc
            && self.pgd_acc == other.pgd_acc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoEvent {
    pub epoch: usize,
    pub peak_pgd_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub attack: AttackConfig,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<MetricsRecord>,
    pub co_event: Option<CoEvent>,
    pub final_eval: Option<FinalEval>,
    /// Where the final weights were written, if anywhere.
    pub checkpoint: Option<String>,
}

impl RunHistory {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn same_metrics(&self, other: &RunHistory) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_metrics(b))
            && self.co_event == other.co_event
            && self.final_eval == other.final_eval
    }
}

/// Relative collapse threshold against the running PGD peak.
pub const CO_RELATIVE: f64 = 0.25;
/// Absolute PGD accuracy ceiling.
pub const CO_ABSOLUTE: f64 = 0.05;
/// FGSM accuracy floor that separates CO from plain failure.
pub const CO_FGSM_FLOOR: f64 = 0.5;

/// First epoch whose PGD accuracy fell below a quarter of the running peak
/// and below 5% while FGSM accuracy stayed at or above 50%.
pub fn detect_co(records: &[MetricsRecord]) -> Option<CoEvent> {
    let mut peak = f64::NEG_INFINITY;
    for r in records {
        peak = peak.max(r.pgd_acc);
        if r.pgd_acc < CO_RELATIVE * peak && r.pgd_acc < CO_ABSOLUTE && r.fgsm_acc >= CO_FGSM_FLOOR {
            return Some(CoEvent { epoch: r.epoch, peak_pgd_acc: peak });
        }
    }
    None
}

/// Natural, single-step and multi-step accuracy on `data`.
pub fn evaluate_all(net: &Network, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<(f64, f64, f64)> {
    let nat = attacks::evaluate(net, data, &AttackConfig::none(), seed)?;
    let fgsm = attacks::evaluate(net, data, &cfg.eval_fgsm, seed)?;
    let pgd = attacks::evaluate(net, data, &cfg.eval_pgd, seed)?;
    Ok((nat, fgsm, pgd))
}

/// Runs `cfg.epochs` epochs. `on_epoch` sees each record together with the
/// weights at the end of that epoch.
pub fn train_with<F>(
    net: &mut Network,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
    schedule: &PerturbSchedule,
    mut on_epoch: F,
) -> Result<RunHistory>
where
    F: FnMut(&MetricsRecord, &Network) -> Result<()>,
{
    cfg.validate()?;
    attack.validate()?;
    if train_data.is_empty() || test_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = Sgd::new(net, cfg.momentum, cfg.weight_decay);
    let n = train_data.len();
    let num_batches = n.div_ceil(cfg.batch_size);
    let mut history = RunHistory::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let order = shuffled(n, rng::sub_seed(cfg.seed, &[rng::stream::SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for b in 0..num_batches {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let mut x = train_data.images.gather_rows(idx);
            if cfg.augment {
                x = data::augment(&x, rng::sub_seed(cfg.seed, &[rng::stream::AUGMENT, epoch as u64, b as u64]));
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train_data.labels[i]).collect();
            let t = (epoch - 1) as f64 + (b + 1) as f64 / num_batches as f64;
            lr = cfg.lr_schedule.lr_at(t, cfg.epochs);
            let step_seed = rng::sub_seed(cfg.seed, &[rng::stream::ATTACK, epoch as u64, b as u64]);
            let out = train_step(net, &x, &labels, attack, schedule, &mut opt, lr, step_seed)?;
            loss_sum += out.loss * idx.len() as f64;
        }
        let (nat_acc, fgsm_acc, pgd_acc) = evaluate_all(net, test_data, cfg, rng::sub_seed(cfg.seed, &[rng::stream::EVAL, epoch as u64]))?;
        let record = MetricsRecord { epoch, lr, train_loss: loss_sum / n as f64, nat_acc, fgsm_acc, pgd_acc, wall_s: start.elapsed().as_secs_f64() };
        on_epoch(&record, net)?;
        history.records.push(record);
        if history.co_event.is_none() {
            history.co_event = detect_co(&history.records);
        }
    }
    if let Some(attack) = &cfg.final_eval {
        let accuracy = attacks::evaluate(net, test_data, attack, rng::sub_seed(cfg.seed, &[rng::stream::EVAL, 0]))?;
        history.final_eval = Some(FinalEval { attack: *attack, accuracy });
    }
    Ok(history)
}

pub fn train(
    net: &mut Network,
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
    schedule: &PerturbSchedule,
) -> Result<RunHistory> {
    train_with(net, train_data, test_data, cfg, attack, schedule, |_, _| Ok(()))
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, pgd: f64, fgsm: f64) -> MetricsRecord {
        MetricsRecord { epoch, lr: 0.0, train_loss: 0.0, nat_acc: 0.0, fgsm_acc: fgsm, pgd_acc: pgd, wall_s: 0.0 }
    }

    fn history(pgd: &[f64], fgsm: &[f64]) -> Vec<MetricsRecord> {
        pgd.iter().zip(fgsm).enumerate().map(|(i, (&p, &f))| rec(i + 1, p, f)).collect()
    }

    #[test]
    fn co_fires_on_collapse() {
        let h = history(&[0.30, 0.32, 0.31, 0.02, 0.01], &[0.6, 0.65, 0.7, 0.95, 0.98]);
        assert_eq!(detect_co(&h), Some(CoEvent { epoch: 4, peak_pgd_acc: 0.32 }));
    }

    #[test]
    fn co_silent_when_improving() {
        let h = history(&[0.1, 0.2, 0.3, 0.4], &[0.5, 0.6, 0.7, 0.8]);
        assert_eq!(detect_co(&h), None);
    }

    #[test]
    fn co_needs_fgsm_to_survive() {
        let h = history(&[0.30, 0.32, 0.02], &[0.6, 0.6, 0.3]);
        assert_eq!(detect_co(&h), None);
    }

    #[test]
    fn cyclic_lr() {
        let s = LrSchedule::Cyclic { max_lr: 0.2, peak_epoch: 15.0 };
        assert_eq!(s.lr_at(0.0, 30), 0.0);
        assert_eq!(s.lr_at(15.0, 30), 0.2);
        assert!((s.lr_at(22.5, 30) - 0.1).abs() < 1e-15);
        assert_eq!(s.lr_at(30.0, 30), 0.0);
        assert_eq!(s.lr_at(45.0, 30), 0.0);
    }

    #[test]
    fn piecewise_lr() {
        let s = LrSchedule::Piecewise { initial_lr: 0.1, milestones: vec![100.0, 150.0], decay: 10.0 };
        assert_eq!(s.lr_at(50.0, 200), 0.1);
        assert!((s.lr_at(120.0, 200) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(199.0, 200) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(500.0, 200) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig::standard(0, LrSchedule::Cyclic { max_lr: 0.2, peak_epoch: 0.0 }, 0.1, 0);
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
