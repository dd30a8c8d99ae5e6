//! PAC-Bayes bound quantities for a layer-aware perturbation schedule.
//!
//! ```text
//! bound = ℓ̂(w) + [max_ν ℓ̂(w+ν) − ℓ̂(w)] + 4·sqrt((Σ_l 1/(2λ_l²) + ln(2n/δ)) / n)
//! ```

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{argmax_rows, GradRequest, Network};
use crate::perturb::{self, Direction, PerturbSchedule};
use crate::rng;

/// `Σ_l 1 / (2 λ_l²)`. A zero strength makes the bound diverge and is
/// reported with its ordinal.
pub fn kl_proxy(schedule: &PerturbSchedule) -> Result<f64> {
    kl_proxy_of(&schedule.lambdas)
}

pub fn kl_proxy_of(lambdas: &[f64]) -> Result<f64> {
    let mut sum = 0.0;
    for (i, &l) in lambdas.iter().enumerate() {
        if l == 0.0 {
            return Err(Error::ZeroLambda { ordinal: i + 1 });
        }
        sum += 1.0 / (2.0 * l * l);
    }
    Ok(sum)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub empirical_loss: f64,
    pub worst_case_gap: f64,
    pub complexity_term: f64,
    pub total_bound: f64,
    pub n: usize,
    pub delta: f64,
    pub kl_proxy: f64,
}

/// `4·sqrt((kl + ln(2n/δ)) / n)`.
pub fn complexity_term(kl: f64, n: usize, delta: f64) -> f64 {
    let n = n as f64;
    4.0 * ((kl + (2.0 * n / delta).ln()) / n).sqrt()
}

pub fn lap_bound(emp_loss: f64, worst_gap: f64, schedule: &PerturbSchedule, n: usize, delta: f64) -> Result<BoundReport> {
    bound_from_lambdas(emp_loss, worst_gap, &schedule.lambdas, n, delta)
}

pub fn bound_from_lambdas(emp_loss: f64, worst_gap: f64, lambdas: &[f64], n: usize, delta: f64) -> Result<BoundReport> {
    if n == 0 {
        return Err(Error::InvalidConfig("bound needs n >= 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!("delta must be in (0, 1), got {delta}")));
    }
    if !(worst_gap >= 0.0) {
        return Err(Error::InvalidConfig(format!("worst-case gap must be >= 0, got {worst_gap}")));
    }
    let kl = kl_proxy_of(lambdas)?;
    let complexity = complexity_term(kl, n, delta);
    Ok(BoundReport {
        empirical_loss: emp_loss,
        worst_case_gap: worst_gap,
        complexity_term: complexity,
        total_bound: emp_loss + worst_gap + complexity,
        n,
        delta,
        kl_proxy: kl,
    })
}

/// Cross-entropy and 0-1 loss of `net` on a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Losses {
    pub cross_entropy: f64,
    pub zero_one: f64,
}

pub fn dataset_losses(net: &Network, data: &Dataset) -> Result<Losses> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let eval = net.evaluate_batch(&data.images, &data.labels, GradRequest::None)?;
    let wrong = argmax_rows(&eval.logits).iter().zip(&data.labels).filter(|(p, y)| p != y).count();
    Ok(Losses { cross_entropy: eval.loss, zero_one: wrong as f64 / data.len() as f64 })
}

/// Largest loss increase found among the probes, per loss kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WorstGap {
    pub base: Losses,
    pub cross_entropy_gap: f64,
    pub zero_one_gap: f64,
    /// Gap of the gradient-direction probe alone (cross-entropy).
    pub gradient_gap: f64,
}

/// Approximates `max_ν ℓ̂(w+ν) − ℓ̂(w)` by the best of one gradient-direction
/// perturbation and `tries − 1` random directions of the same per-layer norms.
/// Gaps are clipped at zero.
pub fn measure_worst_gap(net: &Network, data: &Dataset, schedule: &PerturbSchedule, tries: usize, seed: u64) -> Result<WorstGap> {
    if tries == 0 {
        return Err(Error::InvalidConfig("tries must be >= 1".into()));
    }
    let base = dataset_losses(net, data)?;
    let grads = net.evaluate_batch(&data.images, &data.labels, GradRequest::Params)?.param_grads.expect("requested");
    let weight_grads: Vec<_> = grads.into_iter().map(|g| g.weight).collect();
    let probe = |direction: Direction, k: u64| -> Result<Losses> {
        let nu = perturb::compute_nu_with(&weight_grads, net, &schedule.lambdas, direction, rng::sub_seed(seed, &[rng::stream::BOUND, k]))?;
        let mut moved = net.clone();
        perturb::apply(&mut moved, &nu)?;
        dataset_losses(&moved, data)
    };
    let g = probe(Direction::Gradient, 0)?;
    let gradient_gap = (g.cross_entropy - base.cross_entropy).max(0.0);
    let (mut ce, mut zo) = (g.cross_entropy, g.zero_one);
    for k in 1..tries {
        let r = probe(Direction::Random, k as u64)?;
        ce = ce.max(r.cross_entropy);
        zo = zo.max(r.zero_one);
    }
    Ok(WorstGap { base, cross_entropy_gap: (ce - base.cross_entropy).max(0.0), zero_one_gap: (zo - base.zero_one).max(0.0), gradient_gap })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_lambda_closed_form() {
        let s = PerturbSchedule { mode: perturb::PerturbMode::LapJoint, beta: 0.5, gamma: 0.3, lambdas: vec![0.5; 4] };
        assert_eq!(kl_proxy(&s).unwrap(), 8.0);
    }

    #[test]
    fn zero_lambda_names_the_ordinal() {
        assert!(matches!(kl_proxy_of(&[0.1, 0.0, 0.1]), Err(Error::ZeroLambda { ordinal: 2 })));
    }

    #[test]
    fn total_is_sum_of_parts() {
        let r = bound_from_lambdas(0.1, 0.05, &[0.5; 4], 1000, 0.05).unwrap();
        assert_eq!(r.total_bound, 0.1 + 0.05 + r.complexity_term);
        assert!(bound_from_lambdas(0.1, 0.0, &[0.5], 0, 0.05).is_err());
        assert!(bound_from_lambdas(0.1, 0.0, &[0.5], 10, 1.0).is_err());
        assert!(bound_from_lambdas(0.1, -0.1, &[0.5], 10, 0.5).is_err());
    }
}
