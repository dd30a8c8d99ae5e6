//! Two-direction loss-landscape grids around the current input or weights.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{GradRequest, Network};
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LandscapeGrid {
    pub subject: Subject,
    /// Offsets along both directions; `values[i][j]` sits at `(axis[i], axis[j])`.
    pub axis: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub base_loss: f64,
    pub direction_seed: u64,
}

impl LandscapeGrid {
    pub fn center(&self) -> f64 {
        let c = self.axis.len() / 2;
        self.values[c][c]
    }

    /// Mean |Δloss| over every grid point.
    pub fn sharpness(&self) -> f64 {
        let n = self.axis.len() * self.axis.len();
        self.values.iter().flatten().map(|v| v.abs()).sum::<f64>() / n as f64
    }

    /// CSV with header `a,b,delta_loss`, `b` varying fastest.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,delta_loss\n");
        for (i, a) in self.axis.iter().enumerate() {
            for (j, b) in self.axis.iter().enumerate() {
                out.push_str(&format!("{a},{b},{:e}\n", self.values[i][j]));
            }
        }
        out
    }
}

/// `resolution` evenly spaced offsets over `[-half_width, half_width]` with an
/// exact zero in the middle.
pub fn grid_axis(half_width: f64, resolution: usize) -> Result<Vec<f64>> {
    if resolution < 3 || resolution.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("resolution must be odd and >= 3, got {resolution}")));
    }
    if !(half_width >= 0.0) || !half_width.is_finite() {
        return Err(Error::InvalidConfig(format!("half_width must be finite and >= 0, got {half_width}")));
    }
    let mid = (resolution / 2) as i64;
    Ok((0..resolution as i64).map(|i| half_width * (i - mid) as f64 / mid as f64).collect())
}

/// `loss(a, b) − loss(0, 0)` over the grid. Points are evaluated independently
/// and may run in parallel.
pub fn landscape_with<F>(half_width: f64, resolution: usize, loss: F) -> Result<(Vec<f64>, Vec<Vec<f64>>, f64)>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    let axis = grid_axis(half_width, resolution)?;
    let base = loss(0.0, 0.0)?;
    let r = resolution;
    let flat = par::try_map_indexed(r * r, |k| loss(axis[k / r], axis[k % r]).map(|v| v - base))?;
    let values = flat.chunks(r).map(<[f64]>::to_vec).collect();
    Ok((axis, values, base))
}

fn gaussian_like(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = StandardNormal.sample(&mut r);
    }
    t
}

/// `w + a·d1 + b·d2` (or the same on inputs), skipping zero offsets so that
/// the origin reproduces the unperturbed tensor exactly.
fn offset(base: &Tensor, d1: &Tensor, d2: &Tensor, a: f64, b: f64) -> Tensor {
    let mut out = base.clone();
    for ((v, &x), &y) in out.data_mut().iter_mut().zip(d1.data()).zip(d2.data()) {
        if a != 0.0 {
            *v += a * x;
        }
        if b != 0.0 {
            *v += b * y;
        }
    }
    out
}

/// Input-space grid: two Gaussian directions, each scaled to unit L2 norm per
/// example, at `x + a·d1 + b·d2`.
pub fn landscape_input(net: &Network, x: &Tensor, labels: &[usize], half_width: f64, resolution: usize, seed: u64) -> Result<LandscapeGrid> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let per = x.numel() / n;
    let direction = |k: u64| {
        let mut d = gaussian_like(x.shape(), rng::sub_seed(seed, &[rng::stream::LANDSCAPE, k]));
        for row in d.data_mut().chunks_mut(per) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        d
    };
    let (d1, d2) = (direction(0), direction(1));
    let (axis, values, base_loss) =
        landscape_with(half_width, resolution, |a, b| Ok(net.evaluate_batch(&offset(x, &d1, &d2, a, b), labels, GradRequest::None)?.loss))?;
    Ok(LandscapeGrid { subject: Subject::Input, axis, values, base_loss, direction_seed: seed })
}

/// Weight-space grid for ordinal `l`: two Gaussian directions, each rescaled
/// to `‖w_l‖₂`, so an offset of 1.0 is a 100% relative change. Other layers
/// are untouched and `net` itself is never modified.
pub fn landscape_layer(net: &Network, x: &Tensor, labels: &[usize], l: usize, half_width: f64, resolution: usize, seed: u64) -> Result<LandscapeGrid> {
    let w = net.layer(l)?.weight.clone();
    let wn = w.norm_l2();
    let direction = |k: u64| {
        let d = gaussian_like(w.shape(), rng::sub_seed(seed, &[rng::stream::LANDSCAPE, l as u64, k]));
        let dn = d.norm_l2();
        d.scale(wn / dn)
    };
    let (d1, d2) = (direction(0), direction(1));
    let (axis, values, base_loss) = landscape_with(half_width, resolution, |a, b| {
        let mut probe = net.clone();
        probe.layer_mut(l)?.weight = offset(&w, &d1, &d2, a, b);
        Ok(probe.evaluate_batch(x, labels, GradRequest::None)?.loss)
    })?;
    Ok(LandscapeGrid { subject: Subject::Layer(l), axis, values, base_loss, direction_seed: seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_is_symmetric_with_exact_zero() {
        let a = grid_axis(1.0, 5).unwrap();
        assert_eq!(a, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(grid_axis(1.0, 4).is_err());
        assert!(grid_axis(1.0, 1).is_err());
    }

    #[test]
    fn closed_form_quadratic() {
        let (axis, values, base) = landscape_with(2.0, 5, |a, b| Ok((1.0 + a - 2.0 * b).powi(2))).unwrap();
        assert_eq!(base, 1.0);
        for (i, a) in axis.iter().enumerate() {
            for (j, b) in axis.iter().enumerate() {
                assert!((values[i][j] - ((1.0 + a - 2.0 * b).powi(2) - 1.0)).abs() < 1e-12);
            }
        }
    }
}
