//! Input-attribution methods and the band-structure metric.
//!
//! All methods explain a scalar class score of a differentiable model via
//! the [`Attributable`] trait. Stochastic nets are explained through
//! [`FrozenNet`], which pins one block-noise realization so the explained
//! function is fixed; averaging over realizations is the noise tunnel's job.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{AutodiffError, Graph, TensorId};
use crate::model::{ModelError, NoisePlan, ResidualNet};
use crate::seeds;
use crate::spectral::{bilinear_resize, ImageTensor, SpectralError};

/// Upper bound on rows per recorded graph; keeps peak memory flat when a
/// method batches many forward points.
const BATCH_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error("shape mismatch: input {input_h}x{input_w} vs {other_h}x{other_w}")]
    ShapeMismatch { input_h: usize, input_w: usize, other_h: usize, other_w: usize },
    #[error("steps must be >= 1")]
    ZeroSteps,
    #[error("n_samples must be >= 1")]
    ZeroSamples,
    #[error("baseline set is empty")]
    EmptyBaselines,
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("layer index {layer} out of range for {blocks} blocks")]
    BadLayer { layer: usize, blocks: usize },
    #[error("occlusion window {wh}x{ww} larger than image {h}x{w}")]
    WindowTooLarge { wh: usize, ww: usize, h: usize, w: usize },
    #[error("stride must be >= 1")]
    ZeroStride,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AttributionError>;

/// A differentiable scorer mapping an image batch `[N,1,H,W]` to logits
/// `[N, n_classes]` recorded on a graph.
pub trait Attributable {
    fn logits_graph(&self, g: &mut Graph, x: TensorId) -> Result<TensorId>;
    fn input_dims(&self) -> (usize, usize);
    fn n_classes(&self) -> usize;

    /// The same scorer under an independently drawn frozen noise
    /// realization; deterministic scorers return an identical function.
    fn realization(&self, stream: u64) -> Self
    where
        Self: Sized;
}

/// A residual net pinned to one noise realization (none for deterministic
/// nets), making it a fixed function suitable for path integrals.
#[derive(Clone)]
pub struct FrozenNet<'a> {
    net: &'a ResidualNet,
    noise_seed: Option<u64>,
}

impl<'a> FrozenNet<'a> {
    /// Freeze `net`. For stochastic nets with positive sigma the given seed
    /// pins the realization; deterministic nets ignore it.
    pub fn new(net: &'a ResidualNet, seed: u64) -> Self {
        let noise_seed = (net.config.stochastic && net.config.sde_sigma > 0.0).then_some(seed);
        Self { net, noise_seed }
    }

    pub fn deterministic(net: &'a ResidualNet) -> Self {
        Self { net, noise_seed: None }
    }

    fn plan_for(&self, batch: usize) -> Option<NoisePlan> {
        self.noise_seed.map(|s| NoisePlan::frozen(&self.net.config, batch, s))
    }
}

impl<'a> Attributable for FrozenNet<'a> {
    fn logits_graph(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let n = g.shape(x)[0];
        let plan = self.plan_for(n);
        let trace = self.net.forward_graph(g, x, plan.as_ref(), false)?;
        Ok(trace.logits)
    }

    fn input_dims(&self) -> (usize, usize) {
        (self.net.config.image_h, self.net.config.image_w)
    }

    fn n_classes(&self) -> usize {
        self.net.config.n_classes
    }

    fn realization(&self, stream: u64) -> Self {
        Self { net: self.net, noise_seed: self.noise_seed.map(|s| seeds::derive(s, stream)) }
    }
}

/// Signed per-pixel relevance grid aligned with one explained image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// Row-major `[h * w]` signed values.
    pub values: Vec<f32>,
    pub h: usize,
    pub w: usize,
    pub method: String,
    pub target_class: usize,
    pub baseline_ref: String,
}

impl AttributionMap {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.w + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Save as an image-format grid plus a JSON metadata sidecar at
    /// `<path>.json`.
    pub fn save(&self, path: &Path) -> std::result::Result<(), SpectralError> {
        let grid = ImageTensor::new_unchecked(self.values.clone(), self.h, self.w);
        grid.save(path)?;
        let meta = serde_json::json!({
            "method": self.method,
            "target_class": self.target_class,
            "baseline_ref": self.baseline_ref,
        });
        let sidecar = path.with_extension(format!(
            "{}.json",
            path.extension().and_then(|e| e.to_str()).unwrap_or("att")
        ));
        std::fs::write(sidecar, serde_json::to_string_pretty(&meta).expect("serializes"))?;
        Ok(())
    }
}

fn check_shapes(model: &impl Attributable, x: &ImageTensor, other: &ImageTensor) -> Result<()> {
    let (h, w) = model.input_dims();
    if x.h != h || x.w != w {
        return Err(AttributionError::ShapeMismatch {
            input_h: h,
            input_w: w,
            other_h: x.h,
            other_w: x.w,
        });
    }
    if other.h != x.h || other.w != x.w {
        return Err(AttributionError::ShapeMismatch {
            input_h: x.h,
            input_w: x.w,
            other_h: other.h,
            other_w: other.w,
        });
    }
    Ok(())
}

fn check_target(model: &impl Attributable, target: usize) -> Result<()> {
    let classes = model.n_classes();
    if target >= classes {
        return Err(AttributionError::TargetOutOfRange { target, classes });
    }
    Ok(())
}

/// Gradients of the target logit w.r.t. each input row of a flat batch
/// `[n, h*w]`. Returns per-row gradients and per-row target logits.
fn input_gradients(
    model: &impl Attributable,
    points: &[f32],
    n: usize,
    target: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let (h, w) = model.input_dims();
    debug_assert_eq!(points.len(), n * h * w);
    let mut grads = Vec::with_capacity(points.len());
    let mut scores = Vec::with_capacity(n);
    for chunk_start in (0..n).step_by(BATCH_CHUNK) {
        let chunk_n = BATCH_CHUNK.min(n - chunk_start);
        let slice = &points[chunk_start * h * w..(chunk_start + chunk_n) * h * w];
        let mut g = Graph::new();
        let x = g.leaf(slice.to_vec(), &[chunk_n, 1, h, w], true);
        let logits = model.logits_graph(&mut g, x)?;
        let k = g.shape(logits)[1];
        let mut mask = vec![0.0f32; chunk_n * k];
        for i in 0..chunk_n {
            mask[i * k + target] = 1.0;
        }
        for i in 0..chunk_n {
            scores.push(g.data(logits)[i * k + target]);
        }
        let s = g.masked_sum(logits, &mask)?;
        g.backward(s)?;
        grads.extend_from_slice(g.grad(x).expect("input tracks gradients"));
    }
    Ok((grads, scores))
}

/// Target logit of the model at one image.
pub fn score(model: &impl Attributable, x: &ImageTensor, target: usize) -> Result<f32> {
    check_target(model, target)?;
    let (h, w) = model.input_dims();
    let mut g = Graph::new();
    let xid = g.leaf(x.values.clone(), &[1, 1, h, w], false);
    let logits = model.logits_graph(&mut g, xid)?;
    let k = g.shape(logits)[1];
    Ok(g.data(logits)[target.min(k - 1)])
}

/// Integrated gradients with the midpoint Riemann rule:
/// `A_j = (x_j - b_j) * mean_k dF/dx_j` at `b + (k-1/2)/steps * (x - b)`.
pub fn integrated_gradients(
    model: &impl Attributable,
    x: &ImageTensor,
    baseline: &ImageTensor,
    target: usize,
    steps: usize,
) -> Result<AttributionMap> {
    if steps == 0 {
        return Err(AttributionError::ZeroSteps);
    }
    check_shapes(model, x, baseline)?;
    check_target(model, target)?;

    let d = x.h * x.w;
    let mut points = Vec::with_capacity(steps * d);
    for k in 0..steps {
        let alpha = (k as f32 + 0.5) / steps as f32;
        for j in 0..d {
            points.push(baseline.values[j] + alpha * (x.values[j] - baseline.values[j]));
        }
    }
    let (grads, _) = input_gradients(model, &points, steps, target)?;

    let mut values = vec![0.0f32; d];
    for j in 0..d {
        let mut acc = 0.0f64;
        for k in 0..steps {
            acc += grads[k * d + j] as f64;
        }
        let mean = acc / steps as f64;
        values[j] = ((x.values[j] - baseline.values[j]) as f64 * mean) as f32;
    }
    Ok(AttributionMap {
        values,
        h: x.h,
        w: x.w,
        method: "ig".into(),
        target_class: target,
        baseline_ref: "explicit baseline".into(),
    })
}

/// Completeness residual `|sum_j A_j - (F(x) - F(baseline))|`.
pub fn completeness_gap(
    attr: &AttributionMap,
    model: &impl Attributable,
    x: &ImageTensor,
    baseline: &ImageTensor,
    target: usize,
) -> Result<f64> {
    let fx = score(model, x, target)? as f64;
    let fb = score(model, baseline, target)? as f64;
    Ok((attr.sum() - (fx - fb)).abs())
}

/// Base method smoothed by [`noise_tunnel`].
#[derive(Debug, Clone, Copy)]
pub enum NtBase {
    IntegratedGradients { steps: usize },
}

/// SmoothGrad-style noise tunnel: mean of the base method over `n_samples`
/// Gaussian-perturbed copies of `x`, each clipped back to [0, 1]. Each
/// sample also re-draws the frozen noise realization of stochastic models.
#[allow(clippy::too_many_arguments)]
pub fn noise_tunnel(
    base: NtBase,
    model: &impl Attributable,
    x: &ImageTensor,
    baseline: &ImageTensor,
    target: usize,
    n_samples: usize,
    nt_sigma: f32,
    seed: u64,
) -> Result<AttributionMap> {
    if n_samples == 0 {
        return Err(AttributionError::ZeroSamples);
    }
    check_shapes(model, x, baseline)?;
    check_target(model, target)?;

    let d = x.h * x.w;
    let mut acc = vec![0.0f64; d];
    for i in 0..n_samples {
        let mut rng = seeds::rng(seeds::derive(seed, i as u64));
        let perturbed: Vec<f32> = x
            .values
            .iter()
            .map(|&v| {
                let eps: f32 = rng.sample(StandardNormal);
                (v + nt_sigma * eps).clamp(0.0, 1.0)
            })
            .collect();
        let xi = ImageTensor::new_unchecked(perturbed, x.h, x.w);
        let sample_model = model.realization(i as u64);
        let map = match base {
            NtBase::IntegratedGradients { steps } => {
                integrated_gradients(&sample_model, &xi, baseline, target, steps)?
            }
        };
        for (a, &v) in acc.iter_mut().zip(&map.values) {
            *a += v as f64;
        }
    }
    let values: Vec<f32> = acc.into_iter().map(|v| (v / n_samples as f64) as f32).collect();
    Ok(AttributionMap {
        values,
        h: x.h,
        w: x.w,
        method: "ig-nt".into(),
        target_class: target,
        baseline_ref: "explicit baseline".into(),
    })
}

/// GradientSHAP: expectation over random `(baseline, alpha)` pairs of
/// `(x - b) * grad F` at `b + alpha * (x - b)`.
pub fn gradient_shap(
    model: &impl Attributable,
    x: &ImageTensor,
    baselines: &[ImageTensor],
    target: usize,
    n_samples: usize,
    seed: u64,
) -> Result<AttributionMap> {
    if baselines.is_empty() {
        return Err(AttributionError::EmptyBaselines);
    }
    if n_samples == 0 {
        return Err(AttributionError::ZeroSamples);
    }
    for b in baselines {
        check_shapes(model, x, b)?;
    }
    check_target(model, target)?;

    let d = x.h * x.w;
    let mut rng = seeds::rng(seed);
    let mut points = Vec::with_capacity(n_samples * d);
    let mut chosen = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let bi = rng.gen_range(0..baselines.len());
        let alpha: f32 = rng.gen_range(0.0..1.0);
        let b = &baselines[bi];
        for j in 0..d {
            points.push(b.values[j] + alpha * (x.values[j] - b.values[j]));
        }
        chosen.push(bi);
    }
    let (grads, _) = input_gradients(model, &points, n_samples, target)?;

    let mut acc = vec![0.0f64; d];
    for (i, &bi) in chosen.iter().enumerate() {
        let b = &baselines[bi];
        for j in 0..d {
            acc[j] += (x.values[j] - b.values[j]) as f64 * grads[i * d + j] as f64;
        }
    }
    let values: Vec<f32> = acc.into_iter().map(|v| (v / n_samples as f64) as f32).collect();
    Ok(AttributionMap {
        values,
        h: x.h,
        w: x.w,
        method: "gradshap".into(),
        target_class: target,
        baseline_ref: format!("{} random baselines", baselines.len()),
    })
}

/// Grad-CAM over the output of residual block `layer`: channel weights are
/// spatially averaged gradients, the map is `relu(sum_c w_c * act_c)`
/// bilinearly upsampled to input size.
pub fn grad_cam(
    net: &ResidualNet,
    frozen_seed: u64,
    x: &ImageTensor,
    target: usize,
    layer: usize,
) -> Result<AttributionMap> {
    if layer >= net.config.n_blocks {
        return Err(AttributionError::BadLayer { layer, blocks: net.config.n_blocks });
    }
    let frozen = FrozenNet::new(net, frozen_seed);
    check_target(&frozen, target)?;
    let (h, w) = frozen.input_dims();
    if x.h != h || x.w != w {
        return Err(AttributionError::ShapeMismatch {
            input_h: h,
            input_w: w,
            other_h: x.h,
            other_w: x.w,
        });
    }

    let mut g = Graph::new();
    // Input tracks gradients so the backward sweep reaches every
    // intermediate activation, including the chosen block output.
    let xid = g.leaf(x.values.clone(), &[1, 1, h, w], true);
    let plan = frozen.plan_for(1);
    let trace = net.forward_graph(&mut g, xid, plan.as_ref(), false)?;
    let k = g.shape(trace.logits)[1];
    let mut mask = vec![0.0f32; k];
    mask[target] = 1.0;
    let s = g.masked_sum(trace.logits, &mask)?;
    g.backward(s)?;

    let act_id = trace.block_outputs[layer];
    let act_shape = g.shape(act_id).to_vec();
    let (c, fh, fw) = (act_shape[1], act_shape[2], act_shape[3]);
    let act = g.data(act_id);
    let grad = g.grad(act_id).expect("activation on gradient path");

    let spatial = fh * fw;
    let mut cam = vec![0.0f32; spatial];
    for ci in 0..c {
        let base = ci * spatial;
        let weight: f64 =
            grad[base..base + spatial].iter().map(|&v| v as f64).sum::<f64>() / spatial as f64;
        for s in 0..spatial {
            cam[s] += (weight * act[base + s] as f64) as f32;
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    let values = bilinear_resize(&cam, fh, fw, h, w);
    Ok(AttributionMap {
        values,
        h,
        w,
        method: "gradcam".into(),
        target_class: target,
        baseline_ref: format!("block {layer} activation"),
    })
}

/// Occlusion sensitivity: slide a `window` of the baseline value across the
/// image with the given stride; each pixel's attribution is the mean score
/// drop over all windows covering it.
pub fn occlusion(
    model: &impl Attributable,
    x: &ImageTensor,
    baseline_value: f32,
    target: usize,
    window: (usize, usize),
    stride: usize,
) -> Result<AttributionMap> {
    let (wh, ww) = window;
    if stride == 0 {
        return Err(AttributionError::ZeroStride);
    }
    if wh == 0 || ww == 0 || wh > x.h || ww > x.w {
        return Err(AttributionError::WindowTooLarge { wh, ww, h: x.h, w: x.w });
    }
    check_shapes(model, x, x)?;
    check_target(model, target)?;

    let base_score = score(model, x, target)? as f64;
    let d = x.h * x.w;
    let ys: Vec<usize> = (0..=x.h - wh).step_by(stride).collect();
    let xs: Vec<usize> = (0..=x.w - ww).step_by(stride).collect();

    let mut drop_sum = vec![0.0f64; d];
    let mut cover = vec![0u32; d];
    let positions: Vec<(usize, usize)> =
        ys.iter().flat_map(|&oy| xs.iter().map(move |&ox| (oy, ox))).collect();

    for chunk in positions.chunks(BATCH_CHUNK) {
        let mut batch = Vec::with_capacity(chunk.len() * d);
        for &(oy, ox) in chunk {
            let mut occluded = x.values.clone();
            for dy in 0..wh {
                for dx in 0..ww {
                    occluded[(oy + dy) * x.w + (ox + dx)] = baseline_value;
                }
            }
            batch.extend_from_slice(&occluded);
        }
        let scores = {
            let (h, w) = model.input_dims();
            let mut g = Graph::new();
            let xid = g.leaf(batch, &[chunk.len(), 1, h, w], false);
            let logits = model.logits_graph(&mut g, xid)?;
            let k = g.shape(logits)[1];
            (0..chunk.len()).map(|i| g.data(logits)[i * k + target]).collect::<Vec<f32>>()
        };
        for (&(oy, ox), &s) in chunk.iter().zip(&scores) {
            let drop = base_score - s as f64;
            for dy in 0..wh {
                for dx in 0..ww {
                    let idx = (oy + dy) * x.w + (ox + dx);
                    drop_sum[idx] += drop;
                    cover[idx] += 1;
                }
            }
        }
    }

    let values: Vec<f32> = drop_sum
        .iter()
        .zip(&cover)
        .map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 0.0 })
        .collect();
    Ok(AttributionMap {
        values,
        h: x.h,
        w: x.w,
        method: "occlusion".into(),
        target_class: target,
        baseline_ref: format!("constant {baseline_value}"),
    })
}

/// Horizontal-band structure score in [0, 1]: 1 minus the ratio of mean
/// per-row time variance of `|A|` to the total variance of `|A|`. Uniform
/// or empty maps score 0.
pub fn band_score_grid(values: &[f32], h: usize, w: usize) -> f64 {
    debug_assert_eq!(values.len(), h * w);
    if w < 2 || values.is_empty() {
        return 0.0;
    }
    let abs: Vec<f64> = values.iter().map(|&v| (v as f64).abs()).collect();
    let n = abs.len() as f64;
    let total_mean = abs.iter().sum::<f64>() / n;
    let total_var = abs.iter().map(|v| (v - total_mean).powi(2)).sum::<f64>() / n;
    if total_var < 1e-12 {
        return 0.0;
    }
    let mut row_var_sum = 0.0;
    for r in 0..h {
        let row = &abs[r * w..(r + 1) * w];
        let mean = row.iter().sum::<f64>() / w as f64;
        row_var_sum += row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
    }
    (1.0 - (row_var_sum / h as f64) / total_var).clamp(0.0, 1.0)
}

/// [`band_score_grid`] over an attribution map.
pub fn band_score(attr: &AttributionMap) -> f64 {
    band_score_grid(&attr.values, attr.h, attr.w)
}

/// [`band_score_grid`] over an image.
pub fn band_score_image(img: &ImageTensor) -> f64 {
    band_score_grid(&img.values, img.h, img.w)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `F(x) = w . x + b` as a single-logit model.
    #[derive(Clone)]
    struct LinearModel {
        weights: Vec<f32>,
        bias: f32,
        h: usize,
        w: usize,
    }

    impl Attributable for LinearModel {
        fn logits_graph(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
            let n = g.shape(x)[0];
            let d = self.h * self.w;
            let flat = g.reshape(x, &[n, d])?;
            let w = g.constant(self.weights.clone(), &[d, 1]);
            let b = g.constant(vec![self.bias], &[1]);
            Ok(g.dense(flat, w, b)?)
        }

        fn input_dims(&self) -> (usize, usize) {
            (self.h, self.w)
        }

        fn n_classes(&self) -> usize {
            1
        }

        fn realization(&self, _stream: u64) -> Self {
            self.clone()
        }
    }

    /// `F(x) = x^2` over a single pixel.
    #[derive(Clone)]
    struct SquareModel;

    impl Attributable for SquareModel {
        fn logits_graph(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
            let n = g.shape(x)[0];
            let flat = g.reshape(x, &[n, 1])?;
            Ok(g.mul(flat, flat)?)
        }

        fn input_dims(&self) -> (usize, usize) {
            (1, 1)
        }

        fn n_classes(&self) -> usize {
            1
        }

        fn realization(&self, _stream: u64) -> Self {
            self.clone()
        }
    }

    /// Constant scorer; every attribution of it must vanish.
    #[derive(Clone)]
    struct ConstantModel {
        h: usize,
        w: usize,
        value: f32,
    }

    impl Attributable for ConstantModel {
        fn logits_graph(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
            // Zero weights and a constant bias: every row scores `value`.
            let n = g.shape(x)[0];
            let d = self.h * self.w;
            let flat = g.reshape(x, &[n, d])?;
            let w = g.constant(vec![0.0; d], &[d, 1]);
            let b = g.constant(vec![self.value], &[1]);
            Ok(g.dense(flat, w, b)?)
        }

        fn input_dims(&self) -> (usize, usize) {
            (self.h, self.w)
        }

        fn n_classes(&self) -> usize {
            1
        }

        fn realization(&self, _stream: u64) -> Self {
            self.clone()
        }
    }

    fn image(values: Vec<f32>, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new_unchecked(values, h, w)
    }

    #[test]
    fn ig_is_exact_on_linear_models() {
        let model = LinearModel { weights: vec![2.0, 3.0], bias: 0.5, h: 1, w: 2 };
        let x = image(vec![1.0, 1.0], 1, 2);
        let b = image(vec![0.0, 0.0], 1, 2);
        let attr = integrated_gradients(&model, &x, &b, 0, 8).unwrap();
        assert!((attr.values[0] - 2.0).abs() < 1e-5);
        assert!((attr.values[1] - 3.0).abs() < 1e-5);
        let gap = completeness_gap(&attr, &model, &x, &b, 0).unwrap();
        assert!(gap < 1e-5, "linear completeness gap {gap}");
    }

    #[test]
    fn ig_path_integral_of_square_model() {
        let x = image(vec![1.0], 1, 1);
        let b = image(vec![0.0], 1, 1);
        let attr = integrated_gradients(&SquareModel, &x, &b, 0, 256).unwrap();
        assert!((attr.values[0] - 1.0).abs() < 1e-4, "got {}", attr.values[0]);
    }

    #[test]
    fn ig_vanishes_on_constant_model() {
        let model = ConstantModel { h: 2, w: 2, value: 4.2 };
        let x = image(vec![0.1, 0.5, 0.9, 0.3], 2, 2);
        let b = image(vec![0.0; 4], 2, 2);
        let attr = integrated_gradients(&model, &x, &b, 0, 16).unwrap();
        // The explicit gradient may be absent (constant graph); values must
        // be exactly zero.
        assert!(attr.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ig_rejects_bad_arguments() {
        let model = LinearModel { weights: vec![1.0, 1.0], bias: 0.0, h: 1, w: 2 };
        let x = image(vec![1.0, 1.0], 1, 2);
        let b_bad = image(vec![0.0], 1, 1);
        assert!(matches!(
            integrated_gradients(&model, &x, &b_bad, 0, 8),
            Err(AttributionError::ShapeMismatch { .. })
        ));
        let b = image(vec![0.0, 0.0], 1, 2);
        assert!(matches!(
            integrated_gradients(&model, &x, &b, 0, 0),
            Err(AttributionError::ZeroSteps)
        ));
        assert!(matches!(
            integrated_gradients(&model, &x, &b, 3, 8),
            Err(AttributionError::TargetOutOfRange { target: 3, classes: 1 })
        ));
    }

    #[test]
    fn linearity_axiom_for_combined_models() {
        #[derive(Clone)]
        struct Combined {
            m1: LinearModel,
            m2: SquareModelWide,
            a: f32,
            b: f32,
        }
        /// x^2 summed over pixels, matching LinearModel dims.
        #[derive(Clone)]
        struct SquareModelWide {
            h: usize,
            w: usize,
        }
        impl Attributable for SquareModelWide {
            fn logits_graph(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
                let n = g.shape(x)[0];
                let d = self.h * self.w;
                let flat = g.reshape(x, &[n, d])?;
                let sq = g.mul(flat, flat)?;
                let ones = g.constant(vec![1.0; d], &[d, 1]);
                let zero = g.constant(vec![0.0], &[1]);
                Ok(g.dense(sq, ones, zero)?)
            }
            fn input_dims(&self) -> (usize, usize) {
                (self.h, self.w)
            }
            fn n_classes(&self) -> usize {
                1
            }
            fn realization(&self, _stream: u64) -> Self {
                self.clone()
            }
        }
        impl Attributable for Combined {
            fn logits_graph(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
                let l1 = self.m1.logits_graph(g, x)?;
                let l2 = self.m2.logits_graph(g, x)?;
                let s1 = g.scale(l1, self.a)?;
                let s2 = g.scale(l2, self.b)?;
                Ok(g.add(s1, s2)?)
            }
            fn input_dims(&self) -> (usize, usize) {
                self.m1.input_dims()
            }
            fn n_classes(&self) -> usize {
                1
            }
            fn realization(&self, _stream: u64) -> Self {
                self.clone()
            }
        }

        let m1 = LinearModel { weights: vec![1.5, -0.5, 2.0, 0.25], bias: 0.1, h: 2, w: 2 };
        let m2 = SquareModelWide { h: 2, w: 2 };
        let (a, b) = (0.6f32, -1.2f32);
        let combined = Combined { m1: m1.clone(), m2: m2.clone(), a, b };

        let x = image(vec![0.8, 0.2, 0.4, 0.9], 2, 2);
        let base = image(vec![0.0; 4], 2, 2);
        let steps = 64;
        let attr_c = integrated_gradients(&combined, &x, &base, 0, steps).unwrap();
        let attr_1 = integrated_gradients(&m1, &x, &base, 0, steps).unwrap();
        let attr_2 = integrated_gradients(&m2, &x, &base, 0, steps).unwrap();
        for j in 0..4 {
            let expected = a * attr_1.values[j] + b * attr_2.values[j];
            assert!(
                (attr_c.values[j] - expected).abs() < 1e-4,
                "pixel {j}: {} vs {expected}",
                attr_c.values[j]
            );
        }
    }

    #[test]
    fn symmetry_axiom_for_symmetric_pixels() {
        // F = s + s^2 with s = x_0 + x_1: symmetric in the two pixels.
        #[derive(Clone)]
        struct SymModel;
        impl Attributable for SymModel {
            fn logits_graph(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
                let n = g.shape(x)[0];
                let flat = g.reshape(x, &[n, 2])?;
                let ones = g.constant(vec![1.0, 1.0], &[2, 1]);
                let zero = g.constant(vec![0.0], &[1]);
                let s = g.dense(flat, ones, zero)?;
                let sq = g.mul(s, s)?;
                Ok(g.add(s, sq)?)
            }
            fn input_dims(&self) -> (usize, usize) {
                (1, 2)
            }
            fn n_classes(&self) -> usize {
                1
            }
            fn realization(&self, _stream: u64) -> Self {
                self.clone()
            }
        }
        let x = image(vec![0.7, 0.7], 1, 2);
        let b = image(vec![0.2, 0.2], 1, 2);
        let attr = integrated_gradients(&SymModel, &x, &b, 0, 64).unwrap();
        assert!(
            (attr.values[0] - attr.values[1]).abs() < 1e-5,
            "{} vs {}",
            attr.values[0],
            attr.values[1]
        );
    }

    #[test]
    fn completeness_gap_refines_with_steps() {
        // Smooth nonlinear scorer: gap at 2s never exceeds gap at s plus
        // slack, for s in {16, 64}.
        let model = SquareModelPlusLinear;
        #[derive(Clone)]
        struct SquareModelPlusLinear;
        impl Attributable for SquareModelPlusLinear {
            fn logits_graph(&self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
                let n = g.shape(x)[0];
                let flat = g.reshape(x, &[n, 4])?;
                let sq = g.mul(flat, flat)?;
                let cube = g.mul(sq, flat)?;
                let w = g.constant(vec![1.0, -2.0, 0.5, 1.5], &[4, 1]);
                let zero = g.constant(vec![0.0], &[1]);
                let a = g.dense(cube, w, zero)?;
                let w2 = g.constant(vec![0.3, 0.3, -0.6, 1.0], &[4, 1]);
                let b2 = g.constant(vec![0.0], &[1]);
                let lin = g.dense(flat, w2, b2)?;
                Ok(g.add(a, lin)?)
            }
            fn input_dims(&self) -> (usize, usize) {
                (2, 2)
            }
            fn n_classes(&self) -> usize {
                1
            }
            fn realization(&self, _stream: u64) -> Self {
                self.clone()
            }
        }
        let x = image(vec![0.9, 0.1, 0.6, 0.4], 2, 2);
        let b = image(vec![0.0; 4], 2, 2);
        let gap_at = |s: usize| {
            let attr = integrated_gradients(&model, &x, &b, 0, s).unwrap();
            completeness_gap(&attr, &model, &x, &b, 0).unwrap()
        };
        for s in [16usize, 64] {
            assert!(gap_at(2 * s) <= gap_at(s) + 1e-4, "s={s}");
        }
    }

    #[test]
    fn noise_tunnel_sigma_zero_equals_base() {
        let model = LinearModel { weights: vec![2.0, -1.0], bias: 0.0, h: 1, w: 2 };
        let x = image(vec![0.5, 0.5], 1, 2);
        let b = image(vec![0.0, 0.0], 1, 2);
        let base = integrated_gradients(&model, &x, &b, 0, 16).unwrap();
        let nt = noise_tunnel(
            NtBase::IntegratedGradients { steps: 16 },
            &model,
            &x,
            &b,
            0,
            4,
            0.0,
            9,
        )
        .unwrap();
        for (a, e) in nt.values.iter().zip(&base.values) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_tunnel_single_sample_equals_base_on_perturbed_input() {
        let model = LinearModel { weights: vec![2.0, -1.0], bias: 0.0, h: 1, w: 2 };
        let x = image(vec![0.5, 0.5], 1, 2);
        let b = image(vec![0.0, 0.0], 1, 2);
        let seed = 33;
        let nt = noise_tunnel(
            NtBase::IntegratedGradients { steps: 16 },
            &model,
            &x,
            &b,
            0,
            1,
            0.25,
            seed,
        )
        .unwrap();
        // Reconstruct the one perturbed input the tunnel used.
        let mut rng = seeds::rng(seeds::derive(seed, 0));
        let perturbed: Vec<f32> = x
            .values
            .iter()
            .map(|&v| {
                let eps: f32 = rng.sample(StandardNormal);
                (v + 0.25 * eps).clamp(0.0, 1.0)
            })
            .collect();
        let xp = image(perturbed, 1, 2);
        let base = integrated_gradients(&model, &xp, &b, 0, 16).unwrap();
        assert_eq!(nt.values, base.values);
    }

    #[test]
    fn noise_tunnel_mean_matches_linear_attribution() {
        // For a linear model the expected NT attribution equals the
        // unperturbed attribution; check within 3 standard errors.
        let model = LinearModel { weights: vec![2.0, -3.0], bias: 0.0, h: 1, w: 2 };
        let x = image(vec![0.5, 0.5], 1, 2);
        let b = image(vec![0.0, 0.0], 1, 2);
        let clean = integrated_gradients(&model, &x, &b, 0, 8).unwrap();
        let n = 200;
        let sigma = 0.05f64;
        let nt = noise_tunnel(
            NtBase::IntegratedGradients { steps: 8 },
            &model,
            &x,
            &b,
            0,
            n,
            sigma as f32,
            4,
        )
        .unwrap();
        // Per-element attribution of a linear model at x+eps is
        // w_j * (x_j + eps_j); std of the mean is |w_j| sigma / sqrt(n)
        // (clipping at this sigma is negligible at x=0.5).
        for j in 0..2 {
            let se = model.weights[j].abs() as f64 * sigma / (n as f64).sqrt();
            let diff = (nt.values[j] - clean.values[j]).abs() as f64;
            assert!(diff < 3.0 * se + 1e-9, "pixel {j}: diff {diff} vs 3se {}", 3.0 * se);
        }
    }

    #[test]
    fn gradient_shap_matches_ig_for_linear_model() {
        let model = LinearModel { weights: vec![1.0, -2.0, 0.5, 3.0], bias: 0.2, h: 2, w: 2 };
        let x = image(vec![0.9, 0.1, 0.5, 0.7], 2, 2);
        let b = image(vec![0.1, 0.0, 0.2, 0.0], 2, 2);
        let ig = integrated_gradients(&model, &x, &b, 0, 32).unwrap();
        let shap = gradient_shap(&model, &x, std::slice::from_ref(&b), 0, 512, 5).unwrap();
        // Both equal w . (x - b) exactly for linear F; sampling only touches
        // alpha, which the gradient ignores.
        for j in 0..4 {
            assert!((shap.values[j] - ig.values[j]).abs() < 1e-4);
        }
    }

    #[test]
    fn gradient_shap_zero_cases() {
        let model = LinearModel { weights: vec![1.0, 1.0], bias: 0.0, h: 1, w: 2 };
        let x = image(vec![0.4, 0.6], 1, 2);
        let shap = gradient_shap(&model, &x, &[x.clone()], 0, 16, 0).unwrap();
        assert!(shap.values.iter().all(|&v| v == 0.0), "x equals the sole baseline");

        let constant = ConstantModel { h: 1, w: 2, value: 1.0 };
        let b = image(vec![0.0, 0.0], 1, 2);
        let shap = gradient_shap(&constant, &x, &[b], 0, 16, 0).unwrap();
        assert!(shap.values.iter().all(|&v| v == 0.0));

        assert!(matches!(
            gradient_shap(&model, &x, &[], 0, 16, 0),
            Err(AttributionError::EmptyBaselines)
        ));
    }

    #[test]
    fn occlusion_on_sum_model_recovers_pixels() {
        // F = sum of pixels, window 1x1, baseline 0: attribution equals the
        // pixel value.
        let model = LinearModel { weights: vec![1.0; 4], bias: 0.0, h: 2, w: 2 };
        let x = image(vec![0.3, 0.9, 0.2, 0.6], 2, 2);
        let attr = occlusion(&model, &x, 0.0, 0, (1, 1), 1).unwrap();
        for j in 0..4 {
            assert!((attr.values[j] - x.values[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn occlusion_whole_image_window() {
        let model = LinearModel { weights: vec![1.0, 2.0], bias: 0.0, h: 1, w: 2 };
        let x = image(vec![0.5, 0.5], 1, 2);
        let attr = occlusion(&model, &x, 0.0, 0, (1, 2), 1).unwrap();
        // Single position: every pixel gets F(x) - F(baseline image).
        let expected = 0.5 * 1.0 + 0.5 * 2.0;
        for &v in &attr.values {
            assert!((v - expected).abs() < 1e-5);
        }
    }

    #[test]
    fn occlusion_constant_model_is_zero() {
        let model = ConstantModel { h: 2, w: 2, value: 3.0 };
        let x = image(vec![0.1, 0.2, 0.3, 0.4], 2, 2);
        let attr = occlusion(&model, &x, 0.0, 0, (1, 1), 1).unwrap();
        assert!(attr.values.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn occlusion_rejects_oversized_window() {
        let model = LinearModel { weights: vec![1.0, 1.0], bias: 0.0, h: 1, w: 2 };
        let x = image(vec![0.5, 0.5], 1, 2);
        assert!(matches!(
            occlusion(&model, &x, 0.0, 0, (2, 2), 1),
            Err(AttributionError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn band_score_extremes() {
        // Perfect horizontal bands: rows constant, distinct values.
        let mut values = vec![0.0f32; 4 * 6];
        for r in 0..4 {
            for c in 0..6 {
                values[r * 6 + c] = r as f32;
            }
        }
        assert_eq!(band_score_grid(&values, 4, 6), 1.0);

        // Vertical stripes: all rows identical.
        let mut values = vec![0.0f32; 4 * 6];
        for r in 0..4 {
            for c in 0..6 {
                values[r * 6 + c] = c as f32;
            }
        }
        assert!(band_score_grid(&values, 4, 6) < 1e-12);

        // Uninformative constant map.
        assert_eq!(band_score_grid(&vec![0.5; 24], 4, 6), 0.0);
    }

    #[test]
    fn band_score_of_iid_noise_is_small() {
        let mut total = 0.0;
        let draws = 100;
        for i in 0..draws {
            let mut rng = seeds::rng(i);
            let values: Vec<f32> = (0..64 * 64).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            total += band_score_grid(&values, 64, 64);
        }
        let mean = total / draws as f64;
        assert!(mean < 0.1, "mean band score of iid noise {mean}");
    }

    #[test]
    fn frozen_attribution_is_reproducible() {
        use crate::model::{ResidualNet, ResidualNetConfig};
        let cfg = ResidualNetConfig {
            n_classes: 2,
            n_blocks: 2,
            channels: 4,
            image_h: 8,
            image_w: 8,
            stem_pool: 2,
            stochastic: true,
            sde_sigma: 0.2,
            dt: 1.0,
            mc_samples: 2,
            train_noise: true,
        };
        let mut net = ResidualNet::init(cfg, 3).unwrap();
        // Give the head and second convs nonzero weights so the injected
        // noise reaches the input gradient through downstream relu gates.
        let mut rng = seeds::rng(8);
        for v in net.head.w.data.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for b in net.blocks.iter_mut() {
            for v in b.conv2.w.data.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        let x = {
            let mut rng = seeds::rng(4);
            let values: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            ImageTensor::new(values, 8, 8).unwrap()
        };
        let b = ImageTensor::new(vec![0.0; 64], 8, 8).unwrap();
        let m1 = FrozenNet::new(&net, 42);
        let m2 = FrozenNet::new(&net, 42);
        let a1 = integrated_gradients(&m1, &x, &b, 0, 8).unwrap();
        let a2 = integrated_gradients(&m2, &x, &b, 0, 8).unwrap();
        assert_eq!(a1.values, a2.values, "same frozen seed, same map");
        let m3 = FrozenNet::new(&net, 43);
        let a3 = integrated_gradients(&m3, &x, &b, 0, 8).unwrap();
        assert_ne!(a1.values, a3.values, "different realization, different map");
    }

    #[test]
    fn grad_cam_channel_zero_target() {
        use crate::model::{ResidualNet, ResidualNetConfig};
        // Head weights (1, 0, ..., 0) make the target logit the spatial
        // mean of channel 0, so the cam is proportional to relu(act_0).
        let cfg = ResidualNetConfig {
            n_classes: 2,
            n_blocks: 1,
            channels: 3,
            image_h: 8,
            image_w: 8,
            stem_pool: 2,
            stochastic: false,
            sde_sigma: 0.0,
            dt: 1.0,
            mc_samples: 1,
            train_noise: false,
        };
        let mut net = ResidualNet::init(cfg, 1).unwrap();
        for v in net.head.w.data.iter_mut() {
            *v = 0.0;
        }
        net.head.w.data[0] = 1.0; // channel 0 -> class 0
        let x = {
            let mut rng = seeds::rng(10);
            let values: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            ImageTensor::new(values, 8, 8).unwrap()
        };
        let cam = grad_cam(&net, 0, &x, 0, 0).unwrap();
        assert_eq!((cam.h, cam.w), (8, 8));
        assert!(cam.values.iter().all(|&v| v >= 0.0), "cam is non-negative");

        // Compare against relu(act_0) upsampled, scaled by 1/(h*w).
        let (data, _) = net.batch_tensor(&[&x]).unwrap();
        let mut g = Graph::new();
        let xid = g.leaf(data, &[1, 1, 8, 8], false);
        let trace = net.forward_graph(&mut g, xid, None, false).unwrap();
        let act = g.data(trace.block_outputs[0]);
        let spatial = 4 * 4;
        let ch0: Vec<f32> = act[0..spatial].iter().map(|&v| v.max(0.0) / spatial as f32).collect();
        let expected = bilinear_resize(&ch0, 4, 4, 8, 8);
        for (a, e) in cam.values.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }

        assert!(matches!(
            grad_cam(&net, 0, &x, 0, 5),
            Err(AttributionError::BadLayer { layer: 5, blocks: 1 })
        ));
    }

    #[test]
    fn attribution_map_save_writes_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.att");
        let map = AttributionMap {
            values: vec![0.5, -0.25],
            h: 1,
            w: 2,
            method: "ig".into(),
            target_class: 3,
            baseline_ref: "zero".into(),
        };
        map.save(&path).unwrap();
        let grid = ImageTensor::load(&path).unwrap();
        assert_eq!(grid.values, map.values);
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("map.att.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["method"], "ig");
        assert_eq!(sidecar["target_class"], 3);
    }
}
