//! Point and probabilistic forecast metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// `K` sampled forecasts of one horizon and the realised truth, each `H`
/// frames of dimension `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastEnsemble {
    samples: Vec<Vec<Vec<f64>>>,
    truth: Vec<Vec<f64>>,
}

impl ForecastEnsemble {
    pub fn new(samples: Vec<Vec<Vec<f64>>>, truth: Vec<Vec<f64>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("an ensemble needs at least one sample"));
        }
        if truth.is_empty() {
            return Err(invalid("empty truth"));
        }
        let d = truth[0].len();
        if truth.iter().any(|f| f.len() != d) {
            return Err(shape_err("truth frames differ in dimension"));
        }
        for s in &samples {
            if s.len() != truth.len() || s.iter().any(|f| f.len() != d) {
                return Err(shape_err("every sample must match the truth shape"));
            }
        }
        Ok(Self { samples, truth })
    }

    pub fn samples(&self) -> &[Vec<Vec<f64>>] {
        &self.samples
    }

    pub fn truth(&self) -> &[Vec<f64>] {
        &self.truth
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean absolute error of sample `k` over all `d·H` entries.
    pub fn sample_mae(&self, k: usize) -> f64 {
        let (mut total, mut count) = (0.0, 0usize);
        for (f, t) in self.samples[k].iter().zip(&self.truth) {
            for (a, b) in f.iter().zip(t) {
                total += (a - b).abs();
                count += 1;
            }
        }
        total / count as f64
    }
}

/// Mean over samples of the per-sample MAE.
pub fn mae(ens: &ForecastEnsemble) -> f64 {
    (0..ens.len()).map(|k| ens.sample_mae(k)).sum::<f64>() / ens.len() as f64
}

/// Ensemble CRPS estimator `(1/K)Σ|X_k − y| − (1/(2K²))ΣΣ|X_k − X_j|`.
///
/// The pairwise term is evaluated from the sorted sample in `O(K log K)`.
pub fn crps_ensemble(samples: &[f64], y: f64) -> f64 {
    let k = samples.len() as f64;
    let spread: f64 = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / k;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_{i<j} (x_(j) − x_(i)) = Σ_i (2i − K + 1)(x_(i) − x_(0))
    let lo = sorted[0];
    let pairs: f64 = sorted.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - k + 1.0) * (x - lo)).sum();
    (spread - pairs / (k * k)).max(0.0)
}

/// CRPS of the dimension-summed forecast, averaged over horizon steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrpsSum {
    pub raw: f64,
    /// Mean over steps of `|Σ_d y|`, the normaliser of the relative variant.
    pub truth_scale: f64,
}

impl CrpsSum {
    /// `raw / truth_scale`; `None` when the summed truth is identically zero.
    pub fn normalized(&self) -> Option<f64> {
        (self.truth_scale > 0.0).then(|| self.raw / self.truth_scale)
    }
}

pub fn crps_sum(ens: &ForecastEnsemble) -> CrpsSum {
    let h = ens.truth.len();
    let (mut raw, mut scale) = (0.0, 0.0);
    for step in 0..h {
        let y: f64 = ens.truth[step].iter().sum();
        let xs: Vec<f64> = ens.samples.iter().map(|s| s[step].iter().sum()).collect();
        raw += crps_ensemble(&xs, y);
        scale += y.abs();
    }
    CrpsSum { raw: raw / h as f64, truth_scale: scale / h as f64 }
}

/// Metrics aggregated over many test windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mae_mean: f64,
    /// Standard deviation across the `K` sample indices of the window-averaged MAE.
    pub mae_std: f64,
    pub crps_raw: f64,
    /// Mean raw CRPS over mean `|summed truth|`; `None` when the latter is zero.
    pub crps_normalized: Option<f64>,
    pub n_windows: usize,
    #[serde(rename = "K")]
    pub k: usize,
}

pub fn evaluate(ensembles: &[ForecastEnsemble]) -> Result<EvaluationReport> {
    let Some(first) = ensembles.first() else {
        return Err(invalid("no ensembles to evaluate"));
    };
    let k = first.len();
    if ensembles.iter().any(|e| e.len() != k) {
        return Err(shape_err("all ensembles must hold the same number of samples"));
    }
    let n = ensembles.len() as f64;
    let per_sample: Vec<f64> =
        (0..k).map(|j| ensembles.iter().map(|e| e.sample_mae(j)).sum::<f64>() / n).collect();
    let mae_mean = per_sample.iter().sum::<f64>() / k as f64;
    let mae_std = if k > 1 {
        (per_sample.iter().map(|m| (m - mae_mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    let crps: Vec<CrpsSum> = ensembles.iter().map(crps_sum).collect();
    let crps_raw = crps.iter().map(|c| c.raw).sum::<f64>() / n;
    let scale = crps.iter().map(|c| c.truth_scale).sum::<f64>() / n;
    Ok(EvaluationReport {
        mae_mean,
        mae_std,
        crps_raw,
        crps_normalized: (scale > 0.0).then(|| crps_raw / scale),
        n_windows: ensembles.len(),
        k,
    })
}

/// Sample Pearson correlation; `None` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
