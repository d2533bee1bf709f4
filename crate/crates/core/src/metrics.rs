//! Window error metrics: mean percentage error, root mean squared error and
//! total-energy error, plus per-scenario aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::NormalizationParams;

fn check_shape(truth: &[f64], restored: &[f64]) -> Result<()> {
    if truth.len() != restored.len() {
        return Err(Error::Shape(format!(
            "truth has {} points, restored has {}",
            truth.len(),
            restored.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Shape("empty window".into()));
    }
    Ok(())
}

/// Mean of `|restored - truth| / truth`.
pub fn mpe(truth: &[f64], restored: &[f64]) -> Result<f64> {
    check_shape(truth, restored)?;
    if let Some(x) = truth.iter().find(|&&x| x <= 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "MPE needs positive truth values, found {x}"
        )));
    }
    let sum: f64 = truth
        .iter()
        .zip(restored)
        .map(|(x, r)| (r - x).abs() / x)
        .sum();
    Ok(sum / truth.len() as f64)
}

pub fn rmse(truth: &[f64], restored: &[f64]) -> Result<f64> {
    check_shape(truth, restored)?;
    let sum: f64 = truth.iter().zip(restored).map(|(x, r)| (r - x).powi(2)).sum();
    Ok((sum / truth.len() as f64).sqrt())
}

/// `|sum(restored) - sum(truth)| / sum(truth)`.
pub fn egye(truth: &[f64], restored: &[f64]) -> Result<f64> {
    check_shape(truth, restored)?;
    let total: f64 = truth.iter().sum();
    if total <= 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "EGYE needs a positive truth total, found {total}"
        )));
    }
    let restored_total: f64 = restored.iter().sum();
    Ok((restored_total - total).abs() / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mpe: f64,
    pub rmse_kw: f64,
    /// RMSE as a fraction of the load normalization range.
    pub rmse_norm: f64,
    pub egye: f64,
    pub k: usize,
}

pub fn sample_metrics(
    truth: &[f64],
    restored: &[f64],
    params: &NormalizationParams,
) -> Result<SampleMetrics> {
    let rmse_kw = rmse(truth, restored)?;
    Ok(SampleMetrics {
        mpe: mpe(truth, restored)?,
        rmse_kw,
        rmse_norm: rmse_kw / params.load_range(),
        egye: egye(truth, restored)?,
        k: truth.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub mpe: f64,
    pub rmse_kw: f64,
    pub rmse_norm: f64,
    pub egye: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub samples: Vec<SampleMetrics>,
    pub means: MetricMeans,
    pub failed: usize,
}

impl MetricsReport {
    pub fn succeeded(&self) -> usize {
        self.samples.len()
    }
}

/// Arithmetic mean of each metric over the successful samples.
pub fn aggregate(samples: &[SampleMetrics], label: &str, failed: usize) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::EmptyReport(label.to_string()));
    }
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        label: label.to_string(),
        samples: samples.to_vec(),
        means: MetricMeans {
            mpe: mean(|s| s.mpe),
            rmse_kw: mean(|s| s.rmse_kw),
            rmse_norm: mean(|s| s.rmse_norm),
            egye: mean(|s| s.egye),
        },
        failed,
    })
}

/// A fraction as a percentage with three decimals: `0.02221` -> `"2.221"`.
pub fn format_pct(fraction: f64) -> String {
    format!("{:.3}", fraction * 100.0)
}
