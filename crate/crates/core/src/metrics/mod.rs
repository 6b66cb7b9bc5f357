//! Evaluation metrics: classification, reconstruction fidelity, and
//! segmentation overlap/surface distances.

pub mod classification;
pub mod reconstruction;
pub mod segmentation;

pub use classification::{auc, classification_metrics, BinaryPrediction, ClassificationMetrics};
pub use reconstruction::{reconstruction_metrics, ReconConfig, ReconMetrics};
pub use segmentation::{segmentation_metrics, surface_voxels, ClassMetrics, SegMetrics};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty prediction list")]
    Empty,
    #[error("score at index {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("AUC undefined: no positive samples")]
    NoPositives,
    #[error("AUC undefined: no negative samples")]
    NoNegatives,
    #[error("volume dims mismatch: {a:?} vs {b:?}")]
    DimsMismatch { a: [usize; 3], b: [usize; 3] },
    #[error("SSIM undefined: reference volume is constant and volumes differ")]
    ConstantVolume,
    #[error("segmentation metrics need label volumes")]
    NotLabels,
}

/// Mean and sample standard deviation over repeated measurements.
#[derive(Debug, Clone)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

pub fn summarize(metric: &str, values: &[f64]) -> MetricSummary {
    let n = values.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / n as f64
    };
    let std = if n < 2 {
        0.0
    } else {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n as f64 - 1.0)).sqrt()
    };
    MetricSummary {
        metric: metric.to_string(),
        mean,
        std,
        values: values.to_vec(),
    }
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub task: String,
    pub rows: Vec<MetricSummary>,
}

impl MetricsReport {
    pub fn get(&self, metric: &str) -> Option<&MetricSummary> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    /// `task,metric,mean,std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,mean,std\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                self.task, r.metric, r.mean, r.std
            ));
        }
        out
    }
}
