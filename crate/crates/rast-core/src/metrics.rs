//! Masked loss and evaluation metrics.
//!
//! Every aggregate runs over the valid set only: entries whose target
//! equals the null sentinel contribute neither to the loss nor to any
//! metric. MAE, RMSE, and MAPE are reported at fixed horizons (steps 3,
//! 6, and 12 when the horizon reaches them) plus the average over all
//! steps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean absolute error over valid points, as a differentiable scalar.
/// Returns the count of valid points; when it is zero the loss is a
/// detached zero, which cannot be backpropagated, and the caller should
/// warn and skip the step.
pub fn masked_mae<S: Scalar>(
    pred: &Tensor<S>,
    target: &Tensor<S>,
    null_val: f64,
) -> Result<(Tensor<S>, usize)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("masked_mae", pred.shape(), target.shape()));
    }
    let mask: Vec<S> = target
        .data()
        .iter()
        .map(|v| {
            if v.as_f64() == null_val {
                S::of(0.0)
            } else {
                S::of(1.0)
            }
        })
        .collect();
    let valid = mask.iter().filter(|m| m.as_f64() != 0.0).count();
    if valid == 0 {
        return Ok((Tensor::scalar(S::of(0.0)), 0));
    }
    let mask = Tensor::constant(mask, target.shape())?;
    let loss = pred
        .sub(target)?
        .abs()
        .mul(&mask)?
        .sum_all()
        .scale(1.0 / valid as f64);
    Ok((loss, valid))
}

/// One row of a metrics report.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct HorizonMetrics {
    /// 1-based prediction step, or 0 for the all-step average.
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Valid points the row aggregates over.
    pub count: usize,
}

/// Metrics at the standard horizons plus the all-step average.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    pub average: HorizonMetrics,
    /// True when no valid point existed anywhere; all rows are zero.
    pub warned_empty: bool,
}

impl MetricsReport {
    /// Labeled rows in report order, e.g. ("h3", ...), ..., ("avg", ...).
    pub fn rows(&self) -> Vec<(String, &HorizonMetrics)> {
        let mut out: Vec<(String, &HorizonMetrics)> = self
            .horizons
            .iter()
            .map(|m| (format!("h{}", m.horizon), m))
            .collect();
        out.push(("avg".to_string(), &self.average));
        out
    }
}

const MAPE_EPS: f64 = 1e-5;
const REPORT_HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Default, Clone, Copy)]
struct Accum {
    abs: f64,
    sq: f64,
    pct: f64,
    count: usize,
}

impl Accum {
    fn push(&mut self, y: f64, y_hat: f64) {
        let err = y - y_hat;
        self.abs += err.abs();
        self.sq += err * err;
        self.pct += err.abs() / (y + MAPE_EPS);
        self.count += 1;
    }

    fn finish(self, horizon: usize) -> HorizonMetrics {
        if self.count == 0 {
            return HorizonMetrics {
                horizon,
                mae: 0.0,
                rmse: 0.0,
                mape: 0.0,
                count: 0,
            };
        }
        let m = self.count as f64;
        HorizonMetrics {
            horizon,
            mae: self.abs / m,
            rmse: (self.sq / m).sqrt(),
            mape: 100.0 * self.pct / m,
            count: self.count,
        }
    }
}

/// Computes MAE, RMSE, and MAPE over de-normalized predictions and
/// targets laid out as (B, H, N, D). Targets equal to `null_val` are
/// excluded everywhere.
pub fn compute_metrics(
    pred: &[f64],
    target: &[f64],
    shape: &[usize],
    null_val: f64,
) -> Result<MetricsReport> {
    if shape.len() != 4 {
        return Err(Error::contract(
            "compute_metrics",
            format!("expected a rank-4 shape, got {shape:?}"),
        ));
    }
    let numel: usize = shape.iter().product();
    if pred.len() != numel || target.len() != numel {
        return Err(Error::contract(
            "compute_metrics",
            format!(
                "shape {shape:?} implies {numel} values, got pred {} and target {}",
                pred.len(),
                target.len()
            ),
        ));
    }
    let (b, h, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    let mut per_step = vec![Accum::default(); h];
    let mut overall = Accum::default();
    for bi in 0..b {
        for step in 0..h {
            let base = (bi * h + step) * n * d;
            for i in 0..n * d {
                let y = target[base + i];
                if y == null_val {
                    continue;
                }
                per_step[step].push(y, pred[base + i]);
                overall.push(y, pred[base + i]);
            }
        }
    }
    let horizons = REPORT_HORIZONS
        .iter()
        .filter(|&&step| step <= h)
        .map(|&step| per_step[step - 1].finish(step))
        .collect();
    let warned_empty = overall.count == 0;
    Ok(MetricsReport {
        horizons,
        average: overall.finish(0),
        warned_empty,
    })
}
