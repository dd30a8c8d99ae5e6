//! Weight removal over a range of ordinals.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Random,
    Smallest,
    Largest,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    /// Inclusive ordinal range `[lo, hi]`.
    pub ordinal_range: [usize; 2],
    pub selection: Selection,
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PruneSpec {
    pub fn new(lo: usize, hi: usize, selection: Selection, rate: f64, seed: u64) -> Self {
        Self { ordinal_range: [lo, hi], selection, rate, seed }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let [lo, hi] = self.ordinal_range;
        if lo < 1 || lo > hi || hi > layers {
            return Err(Error::InvalidConfig(format!("ordinal range [{lo}, {hi}] not within 1..={layers}")));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::InvalidConfig(format!("prune rate must be in [0, 1], got {}", self.rate)));
        }
        Ok(())
    }
}

/// Returns a copy of `net` with `round(rate · n)` of the `n` weights in the
/// ordinal range set to zero. Magnitude selections order by `|w|` and break
/// ties by position (ordinal, then flat index); biases are kept.
pub fn prune(net: &Network, spec: &PruneSpec) -> Result<Network> {
    spec.validate(net.num_layers())?;
    let [lo, hi] = spec.ordinal_range;
    let mut slots: Vec<(usize, usize, f64)> = Vec::new();
    for l in lo..=hi {
        for (i, &w) in net.layer(l)?.weight.data().iter().enumerate() {
            slots.push((l, i, w.abs()));
        }
    }
    let k = ((spec.rate * slots.len() as f64).round() as usize).min(slots.len());
    let chosen: Vec<usize> = match spec.selection {
        Selection::Random => {
            let mut r = rng::rng(rng::sub_seed(spec.seed, &[rng::stream::PRUNE]));
            index::sample(&mut r, slots.len(), k).into_vec()
        }
        Selection::Smallest | Selection::Largest => {
            let mut order: Vec<usize> = (0..slots.len()).collect();
            if spec.selection == Selection::Smallest {
                order.sort_by(|&a, &b| slots[a].2.total_cmp(&slots[b].2));
            } else {
                order.sort_by(|&a, &b| slots[b].2.total_cmp(&slots[a].2));
            }
            order.truncate(k);
            order
        }
    };
    let mut out = net.clone();
    for s in chosen {
        let (l, i, _) = slots[s];
        out.layer_mut(l)?.weight.data_mut()[i] = 0.0;
    }
    Ok(out)
}
