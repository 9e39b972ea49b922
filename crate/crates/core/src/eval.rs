//! Gaussian-noise robustness harness and classification metrics.
//!
//! The sweep perturbs normalized test images with unclipped elementwise
//! Gaussian noise at each requested sigma (plus a sigma = 0 clean reference)
//! and reports per-class precision/recall/F1 with unweighted macro averages.
//! 0/0 metric cells are defined as 0.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{Dataset, ModelError, ResidualNet};
use crate::seeds;
use crate::spectral::ImageTensor;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("prediction and truth lengths differ: {preds} vs {truth}")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("empty label vectors")]
    Empty,
    #[error("sigma grid is empty")]
    EmptySigmas,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("sigma grids differ: {0:?} vs {1:?}")]
    GridMismatch(Vec<f64>, Vec<f64>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Per-class precision/recall/F1 plus support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Metrics for one (model, noise level) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub noise_sigma: f64,
    pub model_tag: String,
}

/// Add unclipped elementwise Gaussian noise of the given sigma. The result
/// may leave [0, 1]; deterministic per seed.
pub fn add_gaussian_noise(img: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut rng = seeds::rng(seed);
    let values: Vec<f32> = img
        .values
        .iter()
        .map(|&v| {
            let eps: f64 = rng.sample(StandardNormal);
            (v as f64 + sigma * eps) as f32
        })
        .collect();
    ImageTensor::new_unchecked(values, img.h, img.w)
}

/// Per-class precision/recall/F1 report over predicted and true labels.
/// Any 0/0 is defined as 0, and macro averages run over all classes
/// including zero rows.
pub fn classification_report(
    preds: &[usize],
    truth: &[usize],
    n_classes: usize,
    noise_sigma: f64,
    model_tag: &str,
) -> Result<EvalReport> {
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), truth: truth.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    for &label in preds.iter().chain(truth) {
        if label >= n_classes {
            return Err(EvalError::LabelOutOfRange { label, classes: n_classes });
        }
    }

    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    let mut correct = 0usize;
    for (&p, &t) in preds.iter().zip(truth) {
        support[t] += 1;
        if p == t {
            tp[t] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }

    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let precision = ratio(tp[c], tp[c] + fp[c]);
        let recall = ratio(tp[c], tp[c] + fn_[c]);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { class_id: c, precision, recall, f1, support: support[c] });
    }

    let k = n_classes as f64;
    Ok(EvalReport {
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        accuracy: correct as f64 / preds.len() as f64,
        per_class,
        noise_sigma,
        model_tag: model_tag.into(),
    })
}

/// Evaluate the net on the test set at each noise sigma. A sigma = 0 clean
/// reference is always prepended. Noise seeds derive from
/// `(seed, sigma index, sample index)` so the sweep replays exactly.
pub fn robustness_sweep(
    net: &ResidualNet,
    test_set: &Dataset,
    sigmas: &[f64],
    seed: u64,
    mc_samples: usize,
    model_tag: &str,
) -> Result<Vec<EvalReport>> {
    if sigmas.is_empty() {
        return Err(EvalError::EmptySigmas);
    }
    if test_set.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }

    let mut net = net.clone();
    net.config.mc_samples = mc_samples.max(1);
    let n_classes = net.config.n_classes;

    let mut grid = vec![0.0f64];
    grid.extend_from_slice(sigmas);

    let mut reports = Vec::with_capacity(grid.len());
    for (si, &sigma) in grid.iter().enumerate() {
        let mut preds = Vec::with_capacity(test_set.len());
        // Chunked prediction keeps graph memory flat on large test sets.
        let chunk = 64;
        for start in (0..test_set.len()).step_by(chunk) {
            let end = (start + chunk).min(test_set.len());
            let noisy: Vec<ImageTensor> = (start..end)
                .map(|i| {
                    add_gaussian_noise(
                        &test_set.images[i],
                        sigma,
                        seeds::derive2(seed, si as u64, i as u64),
                    )
                })
                .collect();
            let refs: Vec<&ImageTensor> = noisy.iter().collect();
            let eval_seed = seeds::derive2(seed, 0xE7A1, (si * 1_000_003 + start) as u64);
            for (label, _) in net.predict(&refs, eval_seed)? {
                preds.push(label);
            }
        }
        reports.push(classification_report(
            &preds,
            &test_set.labels,
            n_classes,
            sigma,
            model_tag,
        )?);
    }
    Ok(reports)
}

/// One row of a sweep comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub sigma: f64,
    pub macro_f1_a: f64,
    pub macro_f1_b: f64,
    pub delta: f64,
    pub verdict: String,
}

/// Per-sigma macro-F1 deltas `b - a` with a verdict line per sigma. The two
/// sweeps must cover the same sigma grid.
pub fn compare_reports(a: &[EvalReport], b: &[EvalReport]) -> Result<Vec<ComparisonRow>> {
    let grid_a: Vec<f64> = a.iter().map(|r| r.noise_sigma).collect();
    let grid_b: Vec<f64> = b.iter().map(|r| r.noise_sigma).collect();
    if grid_a != grid_b {
        return Err(EvalError::GridMismatch(grid_a, grid_b));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(ra, rb)| {
            let delta = rb.macro_f1 - ra.macro_f1;
            let verdict = if delta > 0.0 {
                format!("{} leads by {:.6}", rb.model_tag, delta)
            } else if delta < 0.0 {
                format!("{} leads by {:.6}", ra.model_tag, -delta)
            } else {
                "tie".to_string()
            };
            ComparisonRow {
                sigma: ra.noise_sigma,
                macro_f1_a: ra.macro_f1,
                macro_f1_b: rb.macro_f1,
                delta,
                verdict,
            }
        })
        .collect())
}
