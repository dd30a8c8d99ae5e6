//! The catastrophic-overfitting reproduction: a V-FGSM run that collapses,
//! a LAP-joint run on the same data, and the diagnostics taken from the
//! checkpoints on either side of the collapse.

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::data::{self, Dataset, SyntheticKind};
use crate::diagnostics::{self, ParadoxReport, PruneSpec, Selection};
use crate::error::{Error, Result};
use crate::network::{GradRequest, NetSpec, Network};
use crate::perturb::{self, PerturbMode, PerturbSchedule};
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::{self, LrSchedule, RunHistory, TrainConfig};

/// Test split seed relative to the training split seed.
pub const TEST_SEED_OFFSET: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproConfig {
    pub generator: SyntheticKind,
    pub train_size: usize,
    pub test_size: usize,
    pub size: usize,
    pub noise_std: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub max_lr: f64,
    pub peak_epoch: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Run PGD-50-10 on the final weights of both runs.
    pub final_eval: bool,
    /// Largest-magnitude removal rate.
    pub prune_rate: f64,
    /// Smallest-magnitude removal rate.
    pub prune_small_rate: f64,
    pub landscape_half_width: f64,
    pub landscape_resolution: usize,
    pub landscape_samples: usize,
    /// Upper limit on β when checking that input perturbations survive ν.
    pub transfer_beta: f64,
}

impl ReproConfig {
    /// The recorded desk fixture.
    pub fn fixture() -> Self {
        Self {
            generator: SyntheticKind::BarsVsCheckers,
            train_size: 2000,
            test_size: 500,
            size: 16,
            noise_std: 0.3,
            epsilon: 64.0 / 255.0,
            epochs: 30,
            max_lr: 0.2,
            peak_epoch: 15.0,
            beta: 0.05,
            gamma: 0.3,
            final_eval: false,
            prune_rate: 0.1,
            prune_small_rate: 0.1,
            landscape_half_width: 1.0,
            landscape_resolution: 11,
            landscape_samples: 256,
            transfer_beta: 0.05,
        }
    }

    pub fn model(&self) -> NetSpec {
        NetSpec::desk_cnn(1, self.size, self.generator.num_classes())
    }

    pub fn datasets(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        Ok((
            data::gen_synthetic(self.generator, self.train_size, self.size, self.noise_std, seed)?,
            data::gen_synthetic(self.generator, self.test_size, self.size, self.noise_std, seed.wrapping_add(TEST_SEED_OFFSET))?,
        ))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let sched = LrSchedule::Cyclic { max_lr: self.max_lr, peak_epoch: self.peak_epoch };
        let mut cfg = TrainConfig::standard(self.epochs, sched, self.epsilon, seed);
        if !self.final_eval {
            cfg.final_eval = None;
        }
        cfg
    }

    pub fn lap_schedule(&self) -> Result<PerturbSchedule> {
        PerturbSchedule::new(PerturbMode::LapJoint, self.beta, self.gamma, self.model().validate()?.len())
    }
}

/// Weights on either side of a detected collapse.
#[derive(Clone, Debug)]
pub struct CoSnapshots {
    pub epoch: usize,
    /// Epoch of the best PGD accuracy before the collapse.
    pub pre_epoch: usize,
    pub pre: Network,
    pub post: Network,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub vfgsm: RunHistory,
    pub lap: RunHistory,
    pub vfgsm_final: Network,
    pub lap_final: Network,
    pub co: Option<CoSnapshots>,
}

/// Trains one V-FGSM and one LAP-joint network for `seed`.
pub fn run_seed(cfg: &ReproConfig, seed: u64, mut log: impl FnMut(&str)) -> Result<SeedRun> {
    let (train_data, test_data) = cfg.datasets(seed)?;
    let spec = cfg.model();
    let tcfg = cfg.train_config(seed);
    let attack = AttackConfig::v_fgsm(cfg.epsilon);
    let mut line = |tag: &str, r: &trainer::MetricsRecord| {
        log(&format!("{tag} epoch {:>2} loss {:.4} nat {:.3} fgsm {:.3} pgd {:.3}", r.epoch, r.train_loss, r.nat_acc, r.fgsm_acc, r.pgd_acc))
    };

    let mut vfgsm_final = Network::build(&spec, seed)?;
    let mut snapshots = Vec::with_capacity(cfg.epochs);
    let none = PerturbSchedule::none(vfgsm_final.num_layers());
    let vfgsm = trainer::train_with(&mut vfgsm_final, &train_data, &test_data, &tcfg, &attack, &none, |r, net| {
        line("v-fgsm", r);
        snapshots.push(net.clone());
        Ok(())
    })?;
    let co = vfgsm.co_event.map(|ev| {
        let pre_epoch = vfgsm.records[..ev.epoch - 1]
            .iter()
            .fold(None::<&trainer::MetricsRecord>, |best, r| match best {
                Some(b) if b.pgd_acc >= r.pgd_acc => Some(b),
                _ => Some(r),
            })
            .map_or(ev.epoch, |r| r.epoch);
        CoSnapshots { epoch: ev.epoch, pre_epoch, pre: snapshots[pre_epoch - 1].clone(), post: snapshots[ev.epoch - 1].clone() }
    });

    let mut lap_final = Network::build(&spec, seed)?;
    let lap = trainer::train_with(&mut lap_final, &train_data, &test_data, &tcfg, &attack, &cfg.lap_schedule()?, |r, _| {
        line("lap", r);
        Ok(())
    })?;
    Ok(SeedRun { seed, vfgsm, lap, vfgsm_final, lap_final, co })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub id: String,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(id: &str, passed: bool, detail: String) -> Self {
        Self { id: id.into(), passed, detail }
    }
}

/// Verdicts for the collapse, mitigation, removal, spectrum and landscape
/// criteria. Checkpoint diagnostics use the first seed that collapsed.
pub fn verdicts(cfg: &ReproConfig, runs: &[SeedRun]) -> Result<Vec<Verdict>> {
    let mut out = vec![co_verdict(runs), lap_verdict(runs)];
    match runs.iter().find(|r| r.co.is_some()) {
        Some(run) => {
            let co = run.co.as_ref().expect("found");
            let (_, test) = cfg.datasets(run.seed)?;
            out.push(prune_verdict(&prune_study(cfg, &co.post, &test, run.seed)?));
            out.push(spectrum_verdict(&spectrum_study(co)?));
            out.push(landscape_verdict(&landscape_study(cfg, co, &test, run.seed)?));
        }
        None => {
            for id in ["AC-5", "AC-6", "AC-7"] {
                out.push(Verdict::new(id, false, "no seed collapsed, no checkpoint to examine".into()));
            }
        }
    }
    Ok(out)
}

pub fn co_verdict(runs: &[SeedRun]) -> Verdict {
    let mut fired = 0;
    let mut paradox = true;
    let mut parts = Vec::new();
    for run in runs {
        match run.vfgsm.co_event {
            Some(ev) => {
                let r = &run.vfgsm.records[ev.epoch - 1];
                fired += 1;
                paradox &= r.fgsm_acc >= diagnostics::PARADOX_FGSM && r.pgd_acc <= diagnostics::PARADOX_PGD;
                parts.push(format!("seed {}: epoch {} fgsm {:.3} pgd {:.3}", run.seed, ev.epoch, r.fgsm_acc, r.pgd_acc));
            }
            None => parts.push(format!("seed {}: none", run.seed)),
        }
    }
    let needed = (2 * runs.len()).div_ceil(3).max(1);
    Verdict::new("AC-3", fired >= needed && paradox, format!("collapse in {fired}/{} ({})", runs.len(), parts.join("; ")))
}

pub fn lap_verdict(runs: &[SeedRun]) -> Verdict {
    let mut ok = !runs.is_empty();
    let mut parts = Vec::new();
    for run in runs {
        let lap = run.lap.last().map_or(0.0, |r| r.pgd_acc);
        let base = run.vfgsm.last().map_or(0.0, |r| r.pgd_acc);
        let fired = run.lap.co_event.is_some();
        ok &= !fired && lap - base >= 0.10;
        parts.push(format!("seed {}: lap pgd {lap:.3} vs {base:.3}{}", run.seed, if fired { " (collapsed)" } else { "" }));
    }
    Verdict::new("AC-4", ok, parts.join("; "))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PruneStudy {
    pub base: ParadoxReport,
    pub largest_front: ParadoxReport,
    pub smallest_front: ParadoxReport,
    pub largest_back: ParadoxReport,
}

pub fn prune_study(cfg: &ReproConfig, net: &Network, test: &Dataset, seed: u64) -> Result<PruneStudy> {
    let layers = net.num_layers();
    let report = |n: &Network| diagnostics::paradox_report(n, test, cfg.epsilon, rng::sub_seed(seed, &[rng::stream::EVAL]));
    let pruned = |lo, hi, sel, rate| diagnostics::prune(net, &PruneSpec::new(lo, hi, sel, rate, seed)).and_then(|n| report(&n));
    Ok(PruneStudy {
        base: report(net)?,
        largest_front: pruned(1, 2, Selection::Largest, cfg.prune_rate)?,
        smallest_front: pruned(1, 2, Selection::Smallest, cfg.prune_small_rate)?,
        largest_back: pruned(layers - 1, layers, Selection::Largest, cfg.prune_rate)?,
    })
}

pub fn prune_verdict(s: &PruneStudy) -> Verdict {
    let front_drop = s.base.fgsm_acc - s.largest_front.fgsm_acc;
    let back_drop = s.base.fgsm_acc - s.largest_back.fgsm_acc;
    let nat_change = (s.smallest_front.nat_acc - s.base.nat_acc).abs();
    let passed = front_drop >= 0.10 && s.largest_front.pgd_acc >= s.base.pgd_acc && nat_change < 0.05 && back_drop < front_drop;
    Verdict::new(
        "AC-5",
        passed,
        format!(
            "fgsm drop front {front_drop:.3} back {back_drop:.3}; pgd {:.3} -> {:.3}; smallest-prune nat change {nat_change:.3}",
            s.base.pgd_acc, s.largest_front.pgd_acc
        ),
    )
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SpectrumStudy {
    pub pre_variance: f64,
    pub post_variance: f64,
}

impl SpectrumStudy {
    pub fn ratio(&self) -> f64 {
        self.post_variance / self.pre_variance
    }
}

pub fn spectrum_study(co: &CoSnapshots) -> Result<SpectrumStudy> {
    Ok(SpectrumStudy {
        pre_variance: diagnostics::singular_spectrum(&co.pre, 1)?.variance,
        post_variance: diagnostics::singular_spectrum(&co.post, 1)?.variance,
    })
}

pub fn spectrum_verdict(s: &SpectrumStudy) -> Verdict {
    Verdict::new("AC-6", s.ratio() >= 1.5, format!("ordinal-1 variance {:.4} -> {:.4} (x{:.2})", s.pre_variance, s.post_variance, s.ratio()))
}

#[derive(Clone, Debug, Serialize)]
pub struct LandscapeStudy {
    /// `(ordinal, pre, post)` sharpness.
    pub layers: Vec<(usize, f64, f64)>,
}

impl LandscapeStudy {
    pub fn ratio(&self, ordinal: usize) -> Option<f64> {
        self.layers.iter().find(|l| l.0 == ordinal).map(|&(_, pre, post)| post / pre)
    }
}

pub fn landscape_study(cfg: &ReproConfig, co: &CoSnapshots, test: &Dataset, seed: u64) -> Result<LandscapeStudy> {
    let probe = test.head(cfg.landscape_samples);
    let last = co.post.num_layers();
    let mut layers = Vec::new();
    for l in [1, last] {
        let sharp = |net: &Network| {
            diagnostics::landscape_layer(net, &probe.images, &probe.labels, l, cfg.landscape_half_width, cfg.landscape_resolution, seed).map(|g| g.sharpness())
        };
        layers.push((l, sharp(&co.pre)?, sharp(&co.post)?));
    }
    Ok(LandscapeStudy { layers })
}

pub fn landscape_verdict(s: &LandscapeStudy) -> Verdict {
    let first = s.layers.first().map_or(f64::NAN, |&(_, pre, post)| post / pre);
    let last = s.layers.last().map_or(f64::NAN, |&(_, pre, post)| post / pre);
    Verdict::new("AC-7", first >= 2.0 && last < first, format!("sharpness ratio first {first:.2}, last {last:.2}"))
}

/// Fraction of examples whose V-FGSM(ε) input perturbation, computed at `w`,
/// still raises their loss at `w + ν`, where ν is the LAP-joint step built
/// from the adversarial batch gradient.
pub fn transfer_fraction(net: &Network, data: &Dataset, epsilon: f64, schedule: &PerturbSchedule, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let adv = attacks::fgsm(net, &data.images, &data.labels, &AttackConfig::v_fgsm(epsilon), seed)?;
    let grads = net.evaluate_batch(&adv, &data.labels, GradRequest::Params)?.param_grads.expect("requested");
    let weight_grads: Vec<Tensor> = grads.into_iter().map(|g| g.weight).collect();
    let nu = perturb::compute_nu(&weight_grads, net, schedule, rng::sub_seed(seed, &[rng::stream::NU]))?;
    let mut moved = net.clone();
    perturb::apply(&mut moved, &nu)?;
    let clean = moved.evaluate_batch(&data.images, &data.labels, GradRequest::None)?.per_example_loss;
    let attacked = moved.evaluate_batch(&adv, &data.labels, GradRequest::None)?.per_example_loss;
    let up = clean.iter().zip(&attacked).filter(|(c, a)| a > c).count();
    Ok(up as f64 / data.len() as f64)
}

pub fn transfer_verdict(fraction: f64) -> Verdict {
    Verdict::new("AC-12", fraction >= 0.9, format!("{:.1}% of examples", 100.0 * fraction))
}

/// AC-12 on the LAP-joint checkpoint of `run`.
pub fn transfer_check(cfg: &ReproConfig, run: &SeedRun) -> Result<Verdict> {
    let (_, test) = cfg.datasets(run.seed)?;
    let schedule = PerturbSchedule::new(PerturbMode::LapJoint, cfg.beta.min(cfg.transfer_beta), cfg.gamma, run.lap_final.num_layers())?;
    Ok(transfer_verdict(transfer_fraction(&run.lap_final, &test, cfg.epsilon, &schedule, run.seed)?))
}
