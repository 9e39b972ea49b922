//! Residual classifiers over spectrogram images.
//!
//! Two variants share one architecture: a deterministic stack of residual
//! blocks computing `x + R(x)*dt`, and a stochastic stack realizing the
//! Euler-Maruyama discretization of the underlying SDE: a Gaussian increment
//! `sigma * sqrt(dt) * xi` per element at the input plane (the state X(0) is
//! the network input) and after every residual block. With `sde_sigma = 0`
//! the stochastic variant is bit-identical to the deterministic one.
//!
//! Inference on stochastic nets averages logits over `mc_samples`
//! independent noisy passes; per-pass seeds derive from the caller's seed so
//! any pass can be replayed in isolation.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, load_checkpoint, save_checkpoint, AdamConfig, AutodiffError, Graph, Padding,
    Parameter, TensorId,
};
use crate::seeds;
use crate::spectral::ImageTensor;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("image is {got_h}x{got_w}, config expects {want_h}x{want_w}")]
    WrongImageSize { got_h: usize, got_w: usize, want_h: usize, want_w: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("config: {0}")]
    BadConfig(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture and noise-process knobs for [`ResidualNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualNetConfig {
    pub n_classes: usize,
    pub n_blocks: usize,
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Fixed average-pool factor between the stem conv and the residual
    /// stack; keeps block cost quadratic in a small feature map.
    pub stem_pool: usize,
    pub stochastic: bool,
    /// Diffusion scale sigma >= 0; 0 reduces to the deterministic variant.
    pub sde_sigma: f32,
    /// Discretization step applied to the residual drift.
    pub dt: f32,
    /// Forward passes averaged at inference for stochastic nets.
    pub mc_samples: usize,
    /// Inject block noise during training (stochastic nets only).
    pub train_noise: bool,
}

impl Default for ResidualNetConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            n_blocks: 4,
            channels: 16,
            image_h: 64,
            image_w: 64,
            stem_pool: 4,
            stochastic: false,
            sde_sigma: 0.1,
            dt: 1.0,
            mc_samples: 8,
            train_noise: true,
        }
    }
}

impl ResidualNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(ModelError::BadConfig(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.n_blocks < 1 {
            return Err(ModelError::BadConfig("n_blocks must be >= 1".into()));
        }
        if self.mc_samples < 1 {
            return Err(ModelError::BadConfig("mc_samples must be >= 1".into()));
        }
        if self.sde_sigma < 0.0 {
            return Err(ModelError::BadConfig(format!("sde_sigma must be >= 0, got {}", self.sde_sigma)));
        }
        if self.dt <= 0.0 {
            return Err(ModelError::BadConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.stem_pool == 0
            || self.image_h % self.stem_pool != 0
            || self.image_w % self.stem_pool != 0
        {
            return Err(ModelError::BadConfig(format!(
                "stem_pool {} must divide image dims {}x{}",
                self.stem_pool, self.image_h, self.image_w
            )));
        }
        Ok(())
    }

    /// Feature-map dims seen by the residual blocks.
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.image_h / self.stem_pool, self.image_w / self.stem_pool)
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub w: Parameter,
    pub b: Parameter,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

#[derive(Debug, Clone)]
pub struct DenseParams {
    pub w: Parameter,
    pub b: Parameter,
}

/// Residual classifier: stem conv (1 -> channels) + fixed downsample,
/// `n_blocks` shape-preserving residual units, global-average-pool head.
#[derive(Debug, Clone)]
pub struct ResidualNet {
    pub config: ResidualNetConfig,
    pub stem: ConvParams,
    pub blocks: Vec<ResidualBlock>,
    pub head: DenseParams,
}

/// Forward mode: training injects fresh block noise per call (when enabled),
/// evaluation Monte-Carlo-averages stochastic passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One pre-drawn noise realization for an Euler-Maruyama forward pass,
/// already scaled by `sigma * sqrt(dt)` and shaped to a batch. The state
/// X(0) of the discretized SDE is the network input, so the realization
/// carries the t = 0 increment for the input plane alongside one increment
/// per residual block.
#[derive(Debug, Clone)]
pub struct NoisePlan {
    pub input: Vec<f32>,
    pub per_block: Vec<Vec<f32>>,
}

impl NoisePlan {
    /// Independent noise per batch element (training / MC passes).
    pub fn fresh(config: &ResidualNetConfig, batch: usize, seed: u64) -> Self {
        let (fh, fw) = config.feature_dims();
        let scale = config.sde_sigma * config.dt.sqrt();
        let mut draw = |stream: u64, n: usize| -> Vec<f32> {
            let mut rng = seeds::rng(seeds::derive(seed, stream));
            (0..n).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect()
        };
        let input = draw(u64::MAX, batch * config.image_h * config.image_w);
        let n = batch * config.channels * fh * fw;
        let per_block = (0..config.n_blocks).map(|b| draw(b as u64, n)).collect();
        Self { input, per_block }
    }

    /// One realization shared by every batch element; attribution freezes
    /// the network as a fixed function this way.
    pub fn frozen(config: &ResidualNetConfig, batch: usize, seed: u64) -> Self {
        let (fh, fw) = config.feature_dims();
        let scale = config.sde_sigma * config.dt.sqrt();
        let mut draw = |stream: u64, n: usize| -> Vec<f32> {
            let mut rng = seeds::rng(seeds::derive(seed, stream));
            let single: Vec<f32> =
                (0..n).map(|_| scale * rng.sample::<f32, _>(StandardNormal)).collect();
            let mut tiled = Vec::with_capacity(batch * n);
            for _ in 0..batch {
                tiled.extend_from_slice(&single);
            }
            tiled
        };
        let input = draw(u64::MAX, config.image_h * config.image_w);
        let n = config.channels * fh * fw;
        let per_block = (0..config.n_blocks).map(|b| draw(b as u64, n)).collect();
        Self { input, per_block }
    }
}

/// Result of recording one forward pass on a graph.
pub struct ForwardTrace {
    pub logits: TensorId,
    /// Output of each residual block, for layer attribution.
    pub block_outputs: Vec<TensorId>,
    /// Graph ids of the net parameters, in [`ResidualNet::params`] order.
    pub param_ids: Vec<TensorId>,
}

fn he_normal(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    (0..n).map(|_| std * rng.sample::<f32, _>(StandardNormal)).collect()
}

impl ResidualNet {
    /// Initialize from config: He-normal stem and first block convs, zero
    /// second convs (identity initial flow) and zero head (uniform initial
    /// softmax).
    pub fn init(config: ResidualNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut stream = 0u64;
        let mut next_rng = || {
            stream += 1;
            seeds::rng(seeds::derive(seed, stream))
        };

        let stem = ConvParams {
            w: Parameter::new("stem.w", &[c, 1, 3, 3], he_normal(&mut next_rng(), 9, c * 9)),
            b: Parameter::new("stem.b", &[c], vec![0.0; c]),
        };
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let conv1 = ConvParams {
                w: Parameter::new(
                    format!("block{i}.conv1.w"),
                    &[c, c, 3, 3],
                    he_normal(&mut next_rng(), c * 9, c * c * 9),
                ),
                b: Parameter::new(format!("block{i}.conv1.b"), &[c], vec![0.0; c]),
            };
            let conv2 = ConvParams {
                w: Parameter::new(format!("block{i}.conv2.w"), &[c, c, 3, 3], vec![0.0; c * c * 9]),
                b: Parameter::new(format!("block{i}.conv2.b"), &[c], vec![0.0; c]),
            };
            blocks.push(ResidualBlock { conv1, conv2 });
        }
        let head = DenseParams {
            w: Parameter::new("head.w", &[c, config.n_classes], vec![0.0; c * config.n_classes]),
            b: Parameter::new("head.b", &[config.n_classes], vec![0.0; config.n_classes]),
        };
        Ok(Self { config, stem, blocks, head })
    }

    /// Parameters in a stable order (matches checkpoints and trace ids).
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.stem.w, &self.stem.b];
        for b in &self.blocks {
            out.extend([&b.conv1.w, &b.conv1.b, &b.conv2.w, &b.conv2.b]);
        }
        out.extend([&self.head.w, &self.head.b]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = vec![&mut self.stem.w, &mut self.stem.b];
        for b in &mut self.blocks {
            out.push(&mut b.conv1.w);
            out.push(&mut b.conv1.b);
            out.push(&mut b.conv2.w);
            out.push(&mut b.conv2.b);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Flatten a batch of images into `[N,1,H,W]`, validating dims.
    pub fn batch_tensor(&self, images: &[&ImageTensor]) -> Result<(Vec<f32>, usize)> {
        let (h, w) = (self.config.image_h, self.config.image_w);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.h != h || img.w != w {
                return Err(ModelError::WrongImageSize {
                    got_h: img.h,
                    got_w: img.w,
                    want_h: h,
                    want_w: w,
                });
            }
            data.extend_from_slice(&img.values);
        }
        Ok((data, images.len()))
    }

    /// Record one forward pass on `g`. `x` must be `[N,1,H,W]`. Noise, when
    /// given, must be shaped for the same batch.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: TensorId,
        noise: Option<&NoisePlan>,
        track_params: bool,
    ) -> Result<ForwardTrace> {
        let mut param_ids = Vec::new();
        let mut bind = |g: &mut Graph, p: &Parameter| -> TensorId {
            let id = g.leaf(p.data.clone(), &p.shape, track_params);
            param_ids.push(id);
            id
        };

        let mut x = x;
        if let Some(plan) = noise {
            // t = 0 Euler-Maruyama increment: the SDE state starts at the
            // network input.
            let shape = g.shape(x).to_vec();
            let noise_leaf = g.constant(plan.input.clone(), &shape);
            x = g.add(x, noise_leaf)?;
        }

        let stem_w = bind(g, &self.stem.w);
        let stem_b = bind(g, &self.stem.b);
        let mut h = g.conv2d(x, stem_w, stem_b, Padding::Same)?;
        h = g.relu(h)?;
        if self.config.stem_pool > 1 {
            h = g.avg_pool(h, self.config.stem_pool)?;
        }

        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let w1 = bind(g, &block.conv1.w);
            let b1 = bind(g, &block.conv1.b);
            let w2 = bind(g, &block.conv2.w);
            let b2 = bind(g, &block.conv2.b);
            let mut r = g.conv2d(h, w1, b1, Padding::Same)?;
            r = g.relu(r)?;
            r = g.conv2d(r, w2, b2, Padding::Same)?;
            if self.config.dt != 1.0 {
                r = g.scale(r, self.config.dt)?;
            }
            h = g.add(h, r)?;
            if let Some(plan) = noise {
                let shape = g.shape(h).to_vec();
                let noise_leaf = g.constant(plan.per_block[i].clone(), &shape);
                h = g.add(h, noise_leaf)?;
            }
            block_outputs.push(h);
        }

        let pooled = g.global_avg_pool(h)?;
        let head_w = bind(g, &self.head.w);
        let head_b = bind(g, &self.head.b);
        let logits = g.dense(pooled, head_w, head_b)?;
        Ok(ForwardTrace { logits, block_outputs, param_ids })
    }

    fn noise_active(&self, mode: Mode) -> bool {
        self.config.stochastic
            && self.config.sde_sigma > 0.0
            && (mode == Mode::Eval || self.config.train_noise)
    }

    /// One forward pass returning raw logits `[N * n_classes]`.
    /// `noise_seed` draws a fresh per-element noise plan when the noise
    /// process is active; with `sde_sigma == 0` the pass is deterministic.
    pub fn forward_single_pass(
        &self,
        images: &[&ImageTensor],
        noise_seed: Option<u64>,
    ) -> Result<Vec<f32>> {
        let (data, n) = self.batch_tensor(images)?;
        let plan = match noise_seed {
            Some(seed) if self.config.stochastic && self.config.sde_sigma > 0.0 => {
                Some(NoisePlan::fresh(&self.config, n, seed))
            }
            _ => None,
        };
        let mut g = Graph::new();
        let x = g.leaf(data, &[n, 1, self.config.image_h, self.config.image_w], false);
        let trace = self.forward_graph(&mut g, x, plan.as_ref(), false)?;
        Ok(g.data(trace.logits).to_vec())
    }

    /// Forward pass under the given mode. Stochastic evaluation returns the
    /// mean over `mc_samples` passes with per-pass seeds
    /// `derive(seed, pass)`.
    pub fn forward(&self, images: &[&ImageTensor], mode: Mode, seed: u64) -> Result<Vec<f32>> {
        if !self.noise_active(mode) {
            return self.forward_single_pass(images, None);
        }
        match mode {
            Mode::Train => self.forward_single_pass(images, Some(seeds::derive(seed, 0))),
            Mode::Eval => {
                let k = self.config.mc_samples;
                let mut acc: Vec<f64> = Vec::new();
                for pass in 0..k {
                    let logits =
                        self.forward_single_pass(images, Some(seeds::derive(seed, pass as u64)))?;
                    if acc.is_empty() {
                        acc = vec![0.0; logits.len()];
                    }
                    for (a, &v) in acc.iter_mut().zip(&logits) {
                        *a += v as f64;
                    }
                }
                Ok(acc.into_iter().map(|v| (v / k as f64) as f32).collect())
            }
        }
    }

    /// Predicted label per image plus raw per-class scores. Ties break
    /// toward the lower class index.
    pub fn predict(&self, images: &[&ImageTensor], seed: u64) -> Result<Vec<(usize, Vec<f32>)>> {
        let k = self.config.n_classes;
        let logits = self.forward(images, Mode::Eval, seed)?;
        Ok(logits
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                (best, row.to_vec())
            })
            .collect())
    }

    /// Shuffled mini-batch training with Adam. Returns the per-epoch log of
    /// mean batch loss and training accuracy.
    pub fn train(
        &mut self,
        dataset: &Dataset,
        epochs: usize,
        batch_size: usize,
        lr: f32,
        seed: u64,
    ) -> Result<TrainLog> {
        if dataset.images.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let k = self.config.n_classes;
        for &label in &dataset.labels {
            if label >= k {
                return Err(ModelError::LabelOutOfRange { label, classes: k });
            }
        }
        let batch_size = batch_size.max(1);
        let cfg = AdamConfig::with_lr(lr);
        let shuffle_seed = seeds::derive(seed, 1);
        let noise_seed = seeds::derive(seed, 2);
        let n = dataset.images.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut log = TrainLog::default();

        for epoch in 0..epochs {
            shuffle(&mut order, seeds::derive(shuffle_seed, epoch as u64));
            let mut loss_sum = 0.0f64;
            let mut correct = 0usize;

            for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
                let images: Vec<&ImageTensor> = chunk.iter().map(|&i| &dataset.images[i]).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
                let (data, bn) = self.batch_tensor(&images)?;

                let plan = if self.noise_active(Mode::Train) {
                    Some(NoisePlan::fresh(
                        &self.config,
                        bn,
                        seeds::derive2(noise_seed, epoch as u64, batch_idx as u64),
                    ))
                } else {
                    None
                };

                let mut g = Graph::new();
                let x = g.leaf(data, &[bn, 1, self.config.image_h, self.config.image_w], false);
                let trace = self.forward_graph(&mut g, x, plan.as_ref(), true)?;
                let loss = g.softmax_cross_entropy(trace.logits, &labels)?;
                g.backward(loss)?;

                loss_sum += g.data(loss)[0] as f64 * bn as f64;
                for (row, &label) in g.data(trace.logits).chunks_exact(k).zip(&labels) {
                    let mut best = 0usize;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    if best == label {
                        correct += 1;
                    }
                }

                let mut params = self.params_mut();
                for (p, &id) in params.iter_mut().zip(&trace.param_ids) {
                    p.grad = Some(match g.grad(id) {
                        Some(grad) => grad.to_vec(),
                        None => vec![0.0; p.numel()],
                    });
                }
                adam_step(&mut params, cfg)?;
            }

            log.epochs.push(EpochStats {
                epoch,
                loss: loss_sum / n as f64,
                accuracy: correct as f64 / n as f64,
            });
        }
        Ok(log)
    }

    /// Save all parameters with the owning config digest.
    pub fn save(&self, path: &Path, config_digest: &str) -> Result<()> {
        save_checkpoint(path, config_digest, &self.params())?;
        Ok(())
    }

    /// Load parameters saved by [`ResidualNet::save`]. The stored digest and
    /// every shape must match the freshly initialized layout.
    pub fn load(path: &Path, config: ResidualNetConfig, config_digest: &str) -> Result<Self> {
        let (digest, entries) = load_checkpoint(path)?;
        if digest != config_digest {
            return Err(ModelError::CheckpointMismatch(format!(
                "config digest {digest} does not match expected {config_digest}"
            )));
        }
        let mut net = Self::init(config, 0)?;
        let mut params = net.params_mut();
        if entries.len() != params.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                params.len()
            )));
        }
        for (p, e) in params.iter_mut().zip(entries) {
            if p.name != e.name || p.shape != e.shape {
                return Err(ModelError::CheckpointMismatch(format!(
                    "parameter '{}' {:?} vs stored '{}' {:?}",
                    p.name, p.shape, e.name, e.shape
                )));
            }
            p.data = e.data;
        }
        Ok(net)
    }
}

/// Labeled image collection used for training and evaluation.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.loss, e.accuracy));
        }
        out
    }

    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map(|e| e.accuracy).unwrap_or(0.0)
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map(|e| e.loss).unwrap_or(f64::NAN)
    }
}

/// Fisher-Yates shuffle driven by a derived seed.
fn shuffle(order: &mut [usize], seed: u64) {
    let mut rng = seeds::rng(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
