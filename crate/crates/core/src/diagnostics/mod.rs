//! Instruments for dissecting catastrophic overfitting: loss landscapes,
//! kernel spectra, weight removal and the FGSM/PGD paradox.

pub mod landscape;
pub mod prune;
pub mod spectrum;

use serde::Serialize;

use crate::attacks::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::network::Network;

pub use landscape::{landscape_input, landscape_layer, LandscapeGrid, Subject};
pub use prune::{prune, PruneSpec, Selection};
pub use spectrum::{singular_spectrum, spectra_csv, SpectrumReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParadoxReport {
    pub nat_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub paradox_flag: bool,
}

/// FGSM accuracy at or above this, with PGD at or below [`PARADOX_PGD`], flags the paradox.
pub const PARADOX_FGSM: f64 = 0.5;
pub const PARADOX_PGD: f64 = 0.05;

impl ParadoxReport {
    pub fn new(nat_acc: f64, fgsm_acc: f64, pgd_acc: f64) -> Self {
        Self { nat_acc, fgsm_acc, pgd_acc, paradox_flag: fgsm_acc >= PARADOX_FGSM && pgd_acc <= PARADOX_PGD }
    }
}

/// Natural, V-FGSM(ε) and PGD-10(ε) accuracy.
pub fn paradox_report(net: &Network, data: &Dataset, eps: f64, seed: u64) -> Result<ParadoxReport> {
    paradox_report_with(net, data, &AttackConfig::v_fgsm(eps), &AttackConfig::pgd(eps, 10, 1), seed)
}

pub fn paradox_report_with(net: &Network, data: &Dataset, fgsm: &AttackConfig, pgd: &AttackConfig, seed: u64) -> Result<ParadoxReport> {
    let nat = attacks::evaluate(net, data, &AttackConfig::none(), seed)?;
    let f = attacks::evaluate(net, data, fgsm, seed)?;
    let p = attacks::evaluate(net, data, pgd, seed)?;
    Ok(ParadoxReport::new(nat, f, p))
}
