//! Input-space attacks: the single-step FGSM family and multi-step PGD, plus
//! accuracy evaluation under an attack.
//!
//! All perturbations live in an L∞ ball of radius `epsilon` around the clean
//! input (N-FGSM excepted, which is allowed to leave it). Random draws are
//! keyed by `(seed, example index[, restart])`, so results never depend on
//! how a batch is chunked or scheduled.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{GradRequest, Network};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackVariant {
    #[serde(rename = "v-fgsm")]
    VFgsm,
    #[serde(rename = "r-fgsm")]
    RFgsm,
    #[serde(rename = "n-fgsm")]
    NFgsm,
    Pgd,
    None,
}

impl AttackVariant {
    pub fn is_fgsm(self) -> bool {
        matches!(self, AttackVariant::VFgsm | AttackVariant::RFgsm | AttackVariant::NFgsm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub variant: AttackVariant,
    /// L∞ budget in input units.
    pub epsilon: f64,
    /// Step size.
    pub alpha: f64,
    /// Half-width of the uniform noise initialization, as a multiple of `epsilon`.
    pub init_scale: f64,
    /// PGD iterations.
    pub steps: usize,
    /// PGD restarts.
    pub restarts: usize,
    /// Keep `x + delta` inside `[0, 1]`.
    pub clamp_input: bool,
}

impl AttackConfig {
    pub fn none() -> Self {
        Self { variant: AttackVariant::None, epsilon: 0.0, alpha: 0.0, init_scale: 0.0, steps: 0, restarts: 1, clamp_input: true }
    }

    /// Zero-init FGSM with `alpha = epsilon`.
    pub fn v_fgsm(epsilon: f64) -> Self {
        Self { variant: AttackVariant::VFgsm, epsilon, alpha: epsilon, init_scale: 0.0, steps: 1, ..Self::none() }
    }

    /// Uniform init in the ε-ball, `alpha = 1.25 epsilon`.
    pub fn r_fgsm(epsilon: f64) -> Self {
        Self { variant: AttackVariant::RFgsm, epsilon, alpha: 1.25 * epsilon, init_scale: 1.0, steps: 1, ..Self::none() }
    }

    /// Uniform init in the 2ε-ball, `alpha = epsilon`, no projection.
    pub fn n_fgsm(epsilon: f64) -> Self {
        Self { variant: AttackVariant::NFgsm, epsilon, alpha: epsilon, init_scale: 2.0, steps: 1, ..Self::none() }
    }

    /// PGD with `alpha = epsilon / 4` and uniform init in the ε-ball.
    pub fn pgd(epsilon: f64, steps: usize, restarts: usize) -> Self {
        Self { variant: AttackVariant::Pgd, epsilon, alpha: epsilon / 4.0, init_scale: 1.0, steps, restarts, clamp_input: true }
    }

    /// The FGSM-family preset for `variant` at budget `epsilon`.
    pub fn fgsm_preset(variant: AttackVariant, epsilon: f64) -> Result<Self> {
        match variant {
            AttackVariant::VFgsm => Ok(Self::v_fgsm(epsilon)),
            AttackVariant::RFgsm => Ok(Self::r_fgsm(epsilon)),
            AttackVariant::NFgsm => Ok(Self::n_fgsm(epsilon)),
            other => Err(Error::InvalidConfig(format!("{other:?} is not an FGSM variant"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if self.restarts < 1 {
            return bad("restarts must be >= 1".into());
        }
        if self.variant.is_fgsm() && ![0.0, 1.0, 2.0].contains(&self.init_scale) {
            return bad(format!("FGSM init_scale must be 0, 1 or 2, got {}", self.init_scale));
        }
        if !(self.init_scale >= 0.0) {
            return bad(format!("init_scale must be >= 0, got {}", self.init_scale));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uniform noise in `[-half, half]` per coordinate, one stream per example.
fn uniform_noise(shape: &[usize], half: f64, seed: u64, restart: u64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if half == 0.0 {
        return t;
    }
    let per = t.numel() / shape[0];
    for (i, chunk) in t.data_mut().chunks_mut(per).enumerate() {
        let mut r = rng::rng(rng::sub_seed(seed, &[rng::stream::ATTACK, restart, i as u64]));
        for v in chunk {
            *v = r.gen_range(-half..=half);
        }
    }
    t
}

/// Noise initialization `eta ~ U(-init_scale·ε, init_scale·ε)` for the FGSM family.
pub fn fgsm_init(x: &Tensor, cfg: &AttackConfig, seed: u64) -> Tensor {
    uniform_noise(x.shape(), cfg.init_scale * cfg.epsilon, seed, 0)
}

/// `delta = eta + alpha · sign(grad)`, projected to the ε-ball for V/R and
/// (when `clamp_input`) adjusted so that `x + delta` stays in `[0, 1]`.
pub fn fgsm_step(x: &Tensor, eta: &Tensor, grad: &Tensor, cfg: &AttackConfig) -> Tensor {
    let project = cfg.variant != AttackVariant::NFgsm;
    let mut delta = eta.clone();
    for ((d, &g), &xv) in delta.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
        *d += cfg.alpha * sign(g);
        if project {
            *d = d.clamp(-cfg.epsilon, cfg.epsilon);
        }
        if cfg.clamp_input {
            *d = clamp_to_box(xv, *d);
        }
    }
    delta
}

/// Shrinks `d` so that `x + d` lies in `[0, 1]`; untouched when it already does.
fn clamp_to_box(x: f64, d: f64) -> f64 {
    if x + d > 1.0 {
        1.0 - x
    } else if x + d < 0.0 {
        -x
    } else {
        d
    }
}

/// Single-step attack: one input-gradient at `x + eta`.
pub fn fgsm(net: &Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    if !cfg.variant.is_fgsm() {
        return Err(Error::InvalidConfig(format!("fgsm called with {:?}", cfg.variant)));
    }
    let eta = fgsm_init(x, cfg, seed);
    let grad = net.evaluate_batch(&x.add(&eta)?, labels, GradRequest::Input)?.input_grad.expect("requested");
    Ok(fgsm_step(x, &eta, &grad, cfg))
}

fn clamp_into_ball(x: &Tensor, delta: &mut Tensor, eps: f64, clamp_input: bool) {
    for (d, &xv) in delta.data_mut().iter_mut().zip(x.data()) {
        *d = d.clamp(-eps, eps);
        if clamp_input {
            *d = clamp_to_box(xv, *d);
        }
    }
}

/// Projected sign-gradient ascent with random restarts. Per example, the
/// restart reaching the highest loss wins; ties keep the earlier restart.
pub fn pgd(net: &Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.variant != AttackVariant::Pgd {
        return Err(Error::InvalidConfig(format!("pgd called with {:?}", cfg.variant)));
    }
    let n = x.shape()[0];
    let per = x.numel() / n;
    let mut best = Tensor::zeros(x.shape());
    let mut best_loss = vec![f64::NEG_INFINITY; n];
    for restart in 0..cfg.restarts {
        let mut delta = uniform_noise(x.shape(), cfg.init_scale * cfg.epsilon, seed, restart as u64 + 1);
        clamp_into_ball(x, &mut delta, cfg.epsilon, cfg.clamp_input);
        for _ in 0..cfg.steps {
            let grad = net.evaluate_batch(&x.add(&delta)?, labels, GradRequest::Input)?.input_grad.expect("requested");
            for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
                *d += cfg.alpha * sign(g);
            }
            clamp_into_ball(x, &mut delta, cfg.epsilon, cfg.clamp_input);
        }
        if cfg.restarts == 1 {
            return Ok(delta);
        }
        let losses = net.evaluate_batch(&x.add(&delta)?, labels, GradRequest::None)?.per_example_loss;
        for (i, &l) in losses.iter().enumerate() {
            if l > best_loss[i] {
                best_loss[i] = l;
                best.data_mut()[i * per..(i + 1) * per].copy_from_slice(&delta.data()[i * per..(i + 1) * per]);
            }
        }
    }
    Ok(best)
}

/// Perturbation for any configured variant; `None` gives zeros.
pub fn perturb(net: &Network, x: &Tensor, labels: &[usize], cfg: &AttackConfig, seed: u64) -> Result<Tensor> {
    match cfg.variant {
        AttackVariant::None => Ok(Tensor::zeros(x.shape())),
        AttackVariant::Pgd => pgd(net, x, labels, cfg, seed),
        _ => fgsm(net, x, labels, cfg, seed),
    }
}

/// Examples per attack batch in [`evaluate`].
pub const EVAL_BATCH: usize = 128;

/// Fraction of examples classified correctly after the attack.
pub fn evaluate(net: &Network, data: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let n = data.len();
    let mut correct = 0usize;
    for (b, lo) in (0..n).step_by(EVAL_BATCH).enumerate() {
        let hi = (lo + EVAL_BATCH).min(n);
        let x = data.images.slice_rows(lo, hi);
        let labels = &data.labels[lo..hi];
        let bseed = rng::sub_seed(seed, &[rng::stream::EVAL, b as u64]);
        let delta = perturb(net, &x, labels, cfg, bseed)?;
        let adv = if cfg.variant == AttackVariant::None { x } else { x.add(&delta)? };
        let pred = net.predict(&adv)?;
        correct += pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / n as f64)
}
