//! Adversarial weight perturbations.
//!
//! The layer-aware schedule gives ordinal `l` of an `L`-layer network the
//! relative strength
//!
//! ```text
//! λ_l = β · (1 − (ln l / ln(L + 1))^γ)
//! ```
//!
//! so the first layer is perturbed with the full step `β` and later layers
//! progressively less. A perturbation `ν_l` has L2 norm `λ_l · ‖w_l‖₂`, with
//! its direction taken from the loss gradient (or a random draw for the
//! ablation). Biases are never perturbed.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// Plain adversarial training, no weight perturbation.
    None,
    /// Input and weight perturbations from one shared backward pass; accumulate.
    LapJoint,
    /// Weight perturbation from a second backward at the adversarial input; accumulate.
    LapSeq,
    /// As `LapJoint` with a Gaussian direction instead of the gradient.
    LapRandom,
    /// As `LapJoint` with a sign-gradient direction, norm-matched to the L2 form.
    LapInf,
    /// Perturb, update, restore; uniform strength `β` on every layer.
    AwpOriginal,
    /// As `AwpOriginal` without the restore, so perturbations accumulate.
    AwpModified,
}

impl PerturbMode {
    pub fn is_lap(self) -> bool {
        matches!(self, PerturbMode::LapJoint | PerturbMode::LapSeq | PerturbMode::LapRandom | PerturbMode::LapInf)
    }

    pub fn is_awp(self) -> bool {
        matches!(self, PerturbMode::AwpOriginal | PerturbMode::AwpModified)
    }
}

/// `β · (1 − (ln l / ln(L+1))^γ)` for `1 ≤ l ≤ L`.
pub fn layer_lambda(l: usize, layers: usize, beta: f64, gamma: f64) -> Result<f64> {
    if l == 0 || l > layers {
        return Err(Error::OrdinalOutOfRange { ordinal: l, layers });
    }
    check_beta_gamma(beta, gamma)?;
    let ratio = (l as f64).ln() / ((layers + 1) as f64).ln();
    Ok(beta * (1.0 - ratio.powf(gamma)))
}

fn check_beta_gamma(beta: f64, gamma: f64) -> Result<()> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidConfig(format!("beta must be finite and >= 0, got {beta}")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!("gamma must be finite and > 0, got {gamma}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbSchedule {
    pub mode: PerturbMode,
    pub beta: f64,
    pub gamma: f64,
    /// `λ_1..λ_L`, indexed by `ordinal - 1`.
    pub lambdas: Vec<f64>,
}

impl PerturbSchedule {
    /// Layer-aware strengths for LAP modes; AWP modes use `β` on every layer.
    pub fn new(mode: PerturbMode, beta: f64, gamma: f64, layers: usize) -> Result<Self> {
        check_beta_gamma(beta, gamma)?;
        if layers == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one layer".into()));
        }
        let lambdas = match mode {
            PerturbMode::None => vec![0.0; layers],
            m if m.is_awp() => vec![beta; layers],
            _ => (1..=layers).map(|l| layer_lambda(l, layers, beta, gamma)).collect::<Result<_>>()?,
        };
        Ok(Self { mode, beta, gamma, lambdas })
    }

    /// Layer-aware strengths regardless of mode.
    pub fn layer_aware(beta: f64, gamma: f64, layers: usize) -> Result<Self> {
        Self::new(PerturbMode::LapJoint, beta, gamma, layers)
    }

    pub fn none(layers: usize) -> Self {
        Self { mode: PerturbMode::None, beta: 0.0, gamma: 1.0, lambdas: vec![0.0; layers] }
    }

    pub fn num_layers(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambda(&self, ordinal: usize) -> Result<f64> {
        self.lambdas.get(ordinal.wrapping_sub(1)).copied().ok_or(Error::OrdinalOutOfRange { ordinal, layers: self.lambdas.len() })
    }
}

/// One weight-shaped tensor per ordinal (no bias slots).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightDelta {
    pub layers: Vec<Tensor>,
}

impl WeightDelta {
    pub fn zeros_like(net: &Network) -> Self {
        Self { layers: net.layers().iter().map(|l| Tensor::zeros(l.weight.shape())).collect() }
    }

    pub fn check_compatible(&self, net: &Network) -> Result<()> {
        if self.layers.len() != net.num_layers() {
            return Err(Error::InvalidShape(format!("weight delta has {} layers, network has {}", self.layers.len(), net.num_layers())));
        }
        for (d, l) in self.layers.iter().zip(net.layers()) {
            l.weight.check_same_shape(d)?;
        }
        Ok(())
    }

    pub fn norms(&self) -> Vec<f64> {
        self.layers.iter().map(Tensor::norm_l2).collect()
    }
}

/// Direction rule used by [`compute_nu_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `g_l / ‖g_l‖₂`.
    Gradient,
    /// `sign(g_l) / sqrt(numel)`, which has unit norm when no entry is zero.
    Sign,
    /// A standard-normal draw, normalized.
    Random,
}

impl Direction {
    pub fn for_mode(mode: PerturbMode) -> Self {
        match mode {
            PerturbMode::LapRandom => Direction::Random,
            PerturbMode::LapInf => Direction::Sign,
            _ => Direction::Gradient,
        }
    }
}

/// Weight perturbation for `schedule.mode` from weight gradients `grads`
/// (indexed by `ordinal - 1`). `seed` only matters for the random direction.
pub fn compute_nu(grads: &[Tensor], net: &Network, schedule: &PerturbSchedule, seed: u64) -> Result<WeightDelta> {
    compute_nu_with(grads, net, &schedule.lambdas, Direction::for_mode(schedule.mode), seed)
}

/// Per ordinal `l`: `ν_l = λ_l · dir_l · ‖w_l‖₂`. Layers with a zero gradient
/// or `λ_l = 0` get `ν_l = 0`.
pub fn compute_nu_with(grads: &[Tensor], net: &Network, lambdas: &[f64], direction: Direction, seed: u64) -> Result<WeightDelta> {
    if grads.len() != net.num_layers() || lambdas.len() != net.num_layers() {
        return Err(Error::InvalidShape(format!("{} gradients and {} strengths for a {}-layer network", grads.len(), lambdas.len(), net.num_layers())));
    }
    let mut out = Vec::with_capacity(grads.len());
    for (i, (g, layer)) in grads.iter().zip(net.layers()).enumerate() {
        layer.weight.check_same_shape(g)?;
        let lambda = lambdas[i];
        let gnorm = g.norm_l2();
        if lambda == 0.0 || gnorm == 0.0 {
            out.push(Tensor::zeros(g.shape()));
            continue;
        }
        let target = lambda * layer.weight.norm_l2();
        let nu = match direction {
            Direction::Gradient => g.scale(target / gnorm),
            Direction::Sign => {
                let per = target / (g.numel() as f64).sqrt();
                g.map(|v| {
                    if v > 0.0 {
                        per
                    } else if v < 0.0 {
                        -per
                    } else {
                        0.0
                    }
                })
            }
            Direction::Random => {
                let mut r = rng::rng(rng::sub_seed(seed, &[rng::stream::NU, i as u64]));
                let draws = (0..g.numel()).map(|_| StandardNormal.sample(&mut r)).collect();
                let noise = Tensor::new(g.shape().to_vec(), draws)?;
                let n = noise.norm_l2();
                noise.scale(target / n)
            }
        };
        out.push(nu);
    }
    Ok(WeightDelta { layers: out })
}

/// Record of an applied perturbation, so it can later be removed.
#[derive(Clone, Debug)]
pub struct AppliedDelta {
    before: Vec<Tensor>,
    after: Vec<Tensor>,
}

/// `w_l ← w_l + ν_l` for every ordinal. Biases are untouched.
pub fn apply(net: &mut Network, nu: &WeightDelta) -> Result<AppliedDelta> {
    nu.check_compatible(net)?;
    let mut before = Vec::with_capacity(nu.layers.len());
    let mut after = Vec::with_capacity(nu.layers.len());
    for (layer, d) in net.layers_mut().iter_mut().zip(&nu.layers) {
        before.push(layer.weight.clone());
        for (w, &v) in layer.weight.data_mut().iter_mut().zip(d.data()) {
            if v != 0.0 {
                *w += v;
            }
        }
        after.push(layer.weight.clone());
    }
    Ok(AppliedDelta { before, after })
}

/// Removes a perturbation applied by [`apply`]: `w_l ← w_l − ν_l`.
///
/// The subtracted amount is the increment that `apply` actually produced, so
/// when the weights have not changed since, the original weights come back
/// bit for bit. If they have moved (an optimizer step in between), the
/// movement is kept: `w ← w_before + (w − w_after)`.
pub fn subtract(net: &mut Network, applied: AppliedDelta) -> Result<()> {
    if applied.before.len() != net.num_layers() {
        return Err(Error::InvalidShape("applied delta belongs to a different network".into()));
    }
    for ((layer, before), after) in net.layers_mut().iter_mut().zip(&applied.before).zip(&applied.after) {
        layer.weight.check_same_shape(before)?;
        for ((w, &b), &a) in layer.weight.data_mut().iter_mut().zip(before.data()).zip(after.data()) {
            if a.to_bits() == b.to_bits() {
                continue;
            }
            let moved = *w - a;
            *w = if moved == 0.0 { b } else { b + moved };
        }
    }
    Ok(())
}

/// Plain elementwise `w_l ← w_l − ν_l` (no restore record).
pub fn subtract_delta(net: &mut Network, nu: &WeightDelta) -> Result<()> {
    nu.check_compatible(net)?;
    for (layer, d) in net.layers_mut().iter_mut().zip(&nu.layers) {
        for (w, &v) in layer.weight.data_mut().iter_mut().zip(d.data()) {
            if v != 0.0 {
                *w -= v;
            }
        }
    }
    Ok(())
}
