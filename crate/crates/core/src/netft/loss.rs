//! Correlation losses between predicted and measured responses.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Per timepoint, Pearson r across channels; averaged over timepoints.
    #[default]
    Spatial,
    /// Per channel, Pearson r across the batch's timepoints.
    Temporal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Negative mean correlation, in [-1, 1].
    pub loss: f64,
    /// d loss / d pred.
    pub grad: DMatrix<f64>,
    /// Timepoints (or channels) with zero variance in either input; they
    /// contribute 0 to the loss and get no gradient.
    pub degenerate: Vec<usize>,
}

/// Pearson r of `p` and `a` and dr/dp; `None` if either is flat.
fn corr_and_grad(p: &[f64], a: &[f64]) -> Option<(f64, Vec<f64>)> {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let ma = a.iter().sum::<f64>() / n;
    let pc: Vec<f64> = p.iter().map(|v| v - mp).collect();
    let ac: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let spp: f64 = pc.iter().map(|v| v * v).sum();
    let saa: f64 = ac.iter().map(|v| v * v).sum();
    let flat = |s: f64, m: f64| s <= 1e-24 * n * (1.0 + m * m);
    if flat(spp, mp) || flat(saa, ma) {
        return None;
    }
    let norm = (spp * saa).sqrt();
    let r = pc.iter().zip(&ac).map(|(x, y)| x * y).sum::<f64>() / norm;
    let grad = pc.iter().zip(&ac).map(|(x, y)| y / norm - r * x / spp).collect();
    Some((r, grad))
}

pub fn spatial_corr_loss(pred: &DMatrix<f64>, actual: &DMatrix<f64>) -> Result<LossOutput> {
    corr_loss(LossKind::Spatial, pred, actual)
}

/// `pred` and `actual` are timepoints × channels.
pub fn corr_loss(kind: LossKind, pred: &DMatrix<f64>, actual: &DMatrix<f64>) -> Result<LossOutput> {
    if pred.shape() != actual.shape() {
        return Err(Error::shape(format!("prediction {:?} vs actual {:?}", pred.shape(), actual.shape())));
    }
    let (t, c) = pred.shape();
    let mut grad = DMatrix::zeros(t, c);
    let mut degenerate = Vec::new();
    let mut total = 0.0;
    match kind {
        LossKind::Spatial => {
            if c < 2 || t == 0 {
                return Err(Error::param("spatial correlation needs at least 2 channels and 1 timepoint"));
            }
            for i in 0..t {
                let p: Vec<f64> = pred.row(i).iter().copied().collect();
                let a: Vec<f64> = actual.row(i).iter().copied().collect();
                match corr_and_grad(&p, &a) {
                    Some((r, g)) => {
                        total += r;
                        for (j, gj) in g.iter().enumerate() {
                            grad[(i, j)] = -gj / t as f64;
                        }
                    }
                    None => degenerate.push(i),
                }
            }
            Ok(LossOutput { loss: -total / t as f64, grad, degenerate })
        }
        LossKind::Temporal => {
            if t < 2 || c == 0 {
                return Err(Error::param("temporal correlation needs at least 2 timepoints and 1 channel"));
            }
            for j in 0..c {
                let p: Vec<f64> = pred.column(j).iter().copied().collect();
                let a: Vec<f64> = actual.column(j).iter().copied().collect();
                match corr_and_grad(&p, &a) {
                    Some((r, g)) => {
                        total += r;
                        for (i, gi) in g.iter().enumerate() {
                            grad[(i, j)] = -gi / c as f64;
                        }
                    }
                    None => degenerate.push(j),
                }
            }
            Ok(LossOutput { loss: -total / c as f64, grad, degenerate })
        }
    }
}
