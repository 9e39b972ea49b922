//! Pipeline orchestration: generate -> train -> sweep -> explain -> report.
//!
//! Every stage writes into a content-addressed directory under the run's
//! output root, keyed by a digest of the exact inputs that determine its
//! output. Re-running a stage with unchanged inputs lands in the same
//! directory and reproduces identical bytes; changing any upstream knob
//! changes the key, so nothing is ever silently overwritten. Run metadata
//! (tool version, seeds, timings, artifact digests) is written last.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{
    self, band_score, band_score_image, AttributionError, AttributionMap, FrozenNet, NtBase,
};
use crate::eval::{self, EvalError, EvalReport};
use crate::model::{Dataset, ModelError, ResidualNet};
use crate::seeds;
use crate::signalgen::{
    notch_filter, segment, synthesize_recording, DatasetManifest, ManifestClass, ManifestSegment,
    SignalError, Split,
};
use crate::spectral::{stft, to_image, ImageTensor, SpectralError};
use crate::workbench::config::{hex_string, ConfigError, ExperimentConfig, MethodKind};
use crate::workbench::render::{render_heatmap, RenderError};
use crate::workbench::tables;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage '{stage}' is missing prerequisite {path}")]
    MissingPrerequisite { stage: &'static str, path: PathBuf },
    #[error("stage '{stage}': {msg}")]
    Stage { stage: &'static str, msg: String },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Pipeline stages in canonical execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Train,
    Sweep,
    Explain,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Generate, Stage::Train, Stage::Sweep, Stage::Explain, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Train => "train",
            Stage::Sweep => "sweep",
            Stage::Explain => "explain",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "generate" => Some(Stage::Generate),
            "train" => Some(Stage::Train),
            "sweep" => Some(Stage::Sweep),
            "explain" => Some(Stage::Explain),
            "report" => Some(Stage::Report),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub out_dir: String,
    pub wall_ms: u64,
    pub skipped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecord {
    pub dataset: u64,
    pub train: u64,
    pub attribution: u64,
}

/// Reproducibility record for one run: config digest, seeds, stage timings,
/// and a digest inventory of every emitted artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub config_digest: String,
    pub seeds: SeedRecord,
    pub stages: BTreeMap<String, StageRecord>,
    /// Relative artifact path -> content SHA-256.
    pub inventory: BTreeMap<String, String>,
}

impl RunMetadata {
    fn fresh(config: &ExperimentConfig) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: config.digest(),
            seeds: SeedRecord {
                dataset: config.dataset.seed,
                train: config.train.seed,
                attribution: config.attribution.seed,
            },
            stages: BTreeMap::new(),
            inventory: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Stage {
            stage: "metadata",
            msg: format!("cannot parse {}: {e}", path.display()),
        })
    }

    fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("metadata serializes"))?;
        Ok(())
    }
}

fn digest12(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex_string(&hasher.finalize())[..12].to_string()
}

/// Canonical per-section texts of the serialized config.
fn section_texts(config: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut current: Option<(String, String)> = None;
    for line in config.serialize().lines() {
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            if let Some((n, text)) = current.take() {
                out.insert(n, text);
            }
            current = Some((name.to_string(), String::new()));
        } else if let Some((_, text)) = current.as_mut() {
            if !line.is_empty() {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    if let Some((n, text)) = current.take() {
        out.insert(n, text);
    }
    out
}

/// Content keys of each stage directory, chained so any upstream change
/// re-keys every downstream stage.
pub struct StageKeys {
    pub generate: String,
    pub train: String,
    pub sweep: String,
    pub explain: String,
    pub report: String,
}

pub fn stage_keys(config: &ExperimentConfig) -> StageKeys {
    let sections = section_texts(config);
    let get = |name: &str| sections.get(name).cloned().unwrap_or_default();
    let mut gen_input = get("dataset");
    let mut profile_names: Vec<&String> =
        sections.keys().filter(|k| k.starts_with("profile.")).collect();
    profile_names.sort();
    for name in profile_names {
        gen_input.push_str(&sections[name]);
    }
    gen_input.push_str(&get("spectral"));
    let generate = digest12(&gen_input);

    let train = digest12(&format!("{generate}{}{}", get("model"), get("train")));
    let sweep = digest12(&format!("{train}{}", get("eval")));
    let explain = digest12(&format!("{train}{}", get("attribution")));
    let report = digest12(&format!("report{sweep}"));
    StageKeys { generate, train, sweep, explain, report }
}

pub fn dataset_dir(out: &Path, keys: &StageKeys) -> PathBuf {
    out.join(format!("dataset-{}", keys.generate))
}
pub fn model_dir(out: &Path, keys: &StageKeys) -> PathBuf {
    out.join(format!("model-{}", keys.train))
}
pub fn sweep_dir(out: &Path, keys: &StageKeys) -> PathBuf {
    out.join(format!("sweep-{}", keys.sweep))
}
pub fn explain_dir(out: &Path, keys: &StageKeys) -> PathBuf {
    out.join(format!("explain-{}", keys.explain))
}
pub fn report_dir(out: &Path, keys: &StageKeys) -> PathBuf {
    out.join(format!("report-{}", keys.report))
}

const COMPLETE_MARKER: &str = ".complete";

fn stage_complete(dir: &Path) -> bool {
    dir.join(COMPLETE_MARKER).exists()
}

fn mark_complete(dir: &Path) -> Result<()> {
    std::fs::write(dir.join(COMPLETE_MARKER), b"ok\n")?;
    Ok(())
}

/// Run the requested stages in canonical order and write run metadata last.
pub fn run_pipeline(
    config: &ExperimentConfig,
    requested: &[Stage],
    out: &Path,
) -> Result<RunMetadata> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let keys = stage_keys(config);

    let meta_path = out.join("run_metadata.json");
    let mut meta = if meta_path.exists() {
        RunMetadata::load(&meta_path).unwrap_or_else(|_| RunMetadata::fresh(config))
    } else {
        RunMetadata::fresh(config)
    };
    meta.config_digest = config.digest();

    let mut wanted: Vec<Stage> = Stage::ALL.into_iter().filter(|s| requested.contains(s)).collect();
    if wanted.is_empty() {
        wanted = requested.to_vec();
    }

    for stage in wanted {
        let start = Instant::now();
        let (dir, skipped) = match stage {
            Stage::Generate => {
                let dir = dataset_dir(out, &keys);
                if stage_complete(&dir) {
                    (dir, true)
                } else {
                    generate_stage(config, &dir)?;
                    (dir, false)
                }
            }
            Stage::Train => {
                let dataset = dataset_dir(out, &keys);
                require(&dataset.join("manifest.json"), "train")?;
                let dir = model_dir(out, &keys);
                if stage_complete(&dir) {
                    (dir, true)
                } else {
                    train_stage(config, &dataset, &dir, &keys.train)?;
                    (dir, false)
                }
            }
            Stage::Sweep => {
                let dataset = dataset_dir(out, &keys);
                require(&dataset.join("manifest.json"), "sweep")?;
                let model = model_dir(out, &keys);
                require(&model.join("model.ckpt"), "sweep")?;
                let dir = sweep_dir(out, &keys);
                if stage_complete(&dir) {
                    (dir, true)
                } else {
                    sweep_stage(config, &dataset, &model, &dir, &keys.train)?;
                    (dir, false)
                }
            }
            Stage::Explain => {
                let dataset = dataset_dir(out, &keys);
                require(&dataset.join("manifest.json"), "explain")?;
                let model = model_dir(out, &keys);
                require(&model.join("model.ckpt"), "explain")?;
                let dir = explain_dir(out, &keys);
                if stage_complete(&dir) {
                    (dir, true)
                } else {
                    explain_stage(config, &dataset, &model, &dir, &keys.train)?;
                    (dir, false)
                }
            }
            Stage::Report => {
                let sweep = sweep_dir(out, &keys);
                require(&sweep.join("reports.json"), "report")?;
                let dir = report_dir(out, &keys);
                if stage_complete(&dir) {
                    (dir, true)
                } else {
                    report_stage(&sweep, &dir)?;
                    (dir, false)
                }
            }
        };

        for (rel, digest) in inventory_of(out, &dir)? {
            meta.inventory.insert(rel, digest);
        }
        meta.stages.insert(
            stage.as_str().to_string(),
            StageRecord {
                out_dir: dir
                    .strip_prefix(out)
                    .unwrap_or(&dir)
                    .to_string_lossy()
                    .to_string(),
                wall_ms: start.elapsed().as_millis() as u64,
                skipped,
            },
        );
    }

    meta.save(&meta_path)?;
    Ok(meta)
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingPrerequisite { stage, path: path.to_path_buf() })
    }
}

fn inventory_of(root: &Path, dir: &Path) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        if f.file_name().map(|n| n == COMPLETE_MARKER).unwrap_or(false) {
            continue;
        }
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().to_string();
        out.push((rel, sha256_file(&f)?));
    }
    Ok(out)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

/// Synthesize recordings, spectrogram them, split, and write the dataset
/// directory (images plus manifest).
fn generate_stage(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let d = &config.dataset;
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let duration = d.segments_per_class as f64 * d.segment_len as f64 / d.sample_rate;
    let train_count = (d.train_fraction * d.segments_per_class as f64).floor() as usize;

    let mut classes = Vec::new();
    let mut segments_meta = Vec::new();
    for (class_id, profile_cfg) in config.profiles.iter().enumerate() {
        let profile = profile_cfg.to_device_profile(class_id);
        let class_seed = seeds::derive(d.seed, class_id as u64);
        let mut recording = synthesize_recording(&profile, duration, d.sample_rate, class_seed)?;
        if d.notch_center > 0.0 {
            recording = notch_filter(&recording, d.notch_center, d.notch_quality)?;
        }
        let segments = segment(&recording, d.segment_len)?;
        for (i, seg) in segments.iter().enumerate() {
            let spec = stft(seg, config.spectral.window_size, config.spectral.hop, config.spectral.window)?;
            let img = to_image(&spec, config.spectral.image_h, config.spectral.image_w)?;
            let rel = format!("images/class{class_id}_seg{i:03}.img");
            img.save(&dir.join(&rel))?;
            segments_meta.push(ManifestSegment {
                class_id,
                segment_index: i,
                split: if i < train_count { Split::Train } else { Split::Test },
                path: rel,
            });
        }
        classes.push(ManifestClass {
            class_id,
            name: profile_cfg.name.clone(),
            profile,
            seed: class_seed,
        });
    }

    let manifest = DatasetManifest {
        sample_rate: d.sample_rate,
        segment_len: d.segment_len,
        classes,
        segments: segments_meta,
    };
    manifest.save(&dir.join("manifest.json"))?;
    mark_complete(dir)
}

/// Load one split of a generated dataset.
pub fn load_split(dataset_dir: &Path, split: Split) -> Result<(Dataset, Vec<ManifestSegment>)> {
    let manifest = DatasetManifest::load(&dataset_dir.join("manifest.json"))?;
    let mut dataset = Dataset::default();
    let mut kept = Vec::new();
    for seg in manifest.segments.iter().filter(|s| s.split == split) {
        let img = ImageTensor::load(&dataset_dir.join(&seg.path))?;
        dataset.images.push(img);
        dataset.labels.push(seg.class_id);
        kept.push(seg.clone());
    }
    Ok((dataset, kept))
}

fn train_stage(
    config: &ExperimentConfig,
    dataset_dir: &Path,
    dir: &Path,
    train_key: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (train_set, _) = load_split(dataset_dir, Split::Train)?;
    let mut net = ResidualNet::init(config.residual_net_config(), config.train.seed)?;
    let log = net.train(
        &train_set,
        config.train.epochs,
        config.train.batch_size,
        config.train.lr as f32,
        config.train.seed,
    )?;
    net.save(&dir.join("model.ckpt"), train_key)?;
    std::fs::write(dir.join("train_log.csv"), log.to_csv())?;
    mark_complete(dir)
}

fn load_net(config: &ExperimentConfig, model_dir: &Path, train_key: &str) -> Result<ResidualNet> {
    Ok(ResidualNet::load(&model_dir.join("model.ckpt"), config.residual_net_config(), train_key)?)
}

pub fn model_tag(config: &ExperimentConfig) -> &'static str {
    if config.model.stochastic {
        "sde"
    } else {
        "det"
    }
}

fn sweep_stage(
    config: &ExperimentConfig,
    dataset_dir: &Path,
    model_dir: &Path,
    dir: &Path,
    train_key: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (test_set, _) = load_split(dataset_dir, Split::Test)?;
    let net = load_net(config, model_dir, train_key)?;
    let reports = eval::robustness_sweep(
        &net,
        &test_set,
        &config.eval.sigmas,
        seeds::derive(config.dataset.seed, 0x5EEB),
        config.eval.mc_samples,
        model_tag(config),
    )?;
    std::fs::write(
        dir.join("reports.json"),
        serde_json::to_string_pretty(&reports).expect("reports serialize"),
    )?;
    mark_complete(dir)
}

pub fn load_reports(sweep_dir: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(sweep_dir.join("reports.json"))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Stage {
        stage: "report",
        msg: format!("cannot parse reports.json: {e}"),
    })
}

fn report_stage(sweep_dir: &Path, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let reports = load_reports(sweep_dir)?;
    std::fs::write(dir.join("report.csv"), tables::reports_to_csv(&reports))?;
    std::fs::write(dir.join("report.md"), tables::reports_to_markdown(&reports))?;
    mark_complete(dir)
}

/// Evaluate the trained model on the clean test split and emit a single
/// report table; the `evaluate` CLI subcommand's backend.
pub fn evaluate_clean(config: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    config.validate()?;
    let keys = stage_keys(config);
    let dataset = dataset_dir(out, &keys);
    require(&dataset.join("manifest.json"), "evaluate")?;
    let model = model_dir(out, &keys);
    require(&model.join("model.ckpt"), "evaluate")?;

    let (test_set, _) = load_split(&dataset, Split::Test)?;
    let net = load_net(config, &model, &keys.train)?;
    let mut preds = Vec::with_capacity(test_set.len());
    for start in (0..test_set.len()).step_by(64) {
        let end = (start + 64).min(test_set.len());
        let refs: Vec<&ImageTensor> = test_set.images[start..end].iter().collect();
        let eval_seed = seeds::derive2(config.dataset.seed, 0xC1EA, start as u64);
        for (label, _) in net.predict(&refs, eval_seed)? {
            preds.push(label);
        }
    }
    let report = eval::classification_report(
        &preds,
        &test_set.labels,
        config.dataset.n_classes,
        0.0,
        model_tag(config),
    )?;

    let dir = out.join(format!("evaluate-{}", keys.sweep));
    std::fs::create_dir_all(&dir)?;
    let single = vec![report.clone()];
    std::fs::write(dir.join("clean_report.csv"), tables::reports_to_csv(&single))?;
    std::fs::write(dir.join("clean_report.md"), tables::reports_to_markdown(&single))?;
    Ok(report)
}

/// Band score rows emitted by the explain stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainRecord {
    pub class_id: usize,
    pub segment_index: usize,
    pub method: String,
    pub image_band_score: f64,
    pub map_band_score: f64,
    pub map_path: String,
    pub heatmap_path: String,
}

fn explain_stage(
    config: &ExperimentConfig,
    dataset_dir: &Path,
    model_dir: &Path,
    dir: &Path,
    train_key: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("maps"))?;
    std::fs::create_dir_all(dir.join("heatmaps"))?;
    let (test_set, segs) = load_split(dataset_dir, Split::Test)?;
    let net = load_net(config, model_dir, train_key)?;
    let selected = select_correct_samples(
        &net,
        &test_set,
        config.attribution.samples_per_class,
        seeds::derive(config.attribution.seed, 0xC0DE),
    )?;

    let mut records = Vec::new();
    for &idx in &selected {
        let img = &test_set.images[idx];
        let label = test_set.labels[idx];
        let seg = &segs[idx];
        let frozen_seed = seeds::derive2(config.attribution.seed, label as u64, seg.segment_index as u64);
        let map = compute_attribution(config, &net, img, label, frozen_seed)?;

        let stem = format!("class{}_seg{:03}_{}", label, seg.segment_index, map.method);
        let map_rel = format!("maps/{stem}.att");
        map.save(&dir.join(&map_rel))?;
        let heat_rel = format!("heatmaps/{stem}.ppm");
        std::fs::write(dir.join(&heat_rel), render_heatmap(&map, img)?)?;

        records.push(ExplainRecord {
            class_id: label,
            segment_index: seg.segment_index,
            method: map.method.clone(),
            image_band_score: band_score_image(img),
            map_band_score: band_score(&map),
            map_path: map_rel,
            heatmap_path: heat_rel,
        });
    }

    let mut csv = String::from("class,segment,method,image_band_score,map_band_score\n");
    for r in &records {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.class_id, r.segment_index, r.method, r.image_band_score, r.map_band_score
        ));
    }
    std::fs::write(dir.join("band_scores.csv"), csv)?;
    std::fs::write(
        dir.join("explain.json"),
        serde_json::to_string_pretty(&records).expect("records serialize"),
    )?;
    mark_complete(dir)
}

/// Indices of up to `per_class` correctly classified test samples per class,
/// in dataset order.
pub fn select_correct_samples(
    net: &ResidualNet,
    test_set: &Dataset,
    per_class: usize,
    eval_seed: u64,
) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; net.config.n_classes];
    let mut selected = Vec::new();
    for start in (0..test_set.len()).step_by(64) {
        let end = (start + 64).min(test_set.len());
        let refs: Vec<&ImageTensor> = test_set.images[start..end].iter().collect();
        let preds = net.predict(&refs, seeds::derive(eval_seed, start as u64))?;
        for (offset, (pred, _)) in preds.into_iter().enumerate() {
            let idx = start + offset;
            let label = test_set.labels[idx];
            if pred == label && counts[label] < per_class {
                counts[label] += 1;
                selected.push(idx);
            }
        }
    }
    Ok(selected)
}

/// Dispatch one attribution method per the config.
pub fn compute_attribution(
    config: &ExperimentConfig,
    net: &ResidualNet,
    img: &ImageTensor,
    target: usize,
    frozen_seed: u64,
) -> Result<AttributionMap> {
    let a = &config.attribution;
    let frozen = FrozenNet::new(net, frozen_seed);
    let zero = ImageTensor::new(vec![0.0; img.h * img.w], img.h, img.w)
        .expect("zero baseline is valid");
    let map = match a.method {
        MethodKind::Ig => {
            attribution::integrated_gradients(&frozen, img, &zero, target, a.ig_steps)?
        }
        MethodKind::IgNt => attribution::noise_tunnel(
            NtBase::IntegratedGradients { steps: a.ig_steps },
            &frozen,
            img,
            &zero,
            target,
            a.nt_samples,
            a.nt_sigma as f32,
            seeds::derive(frozen_seed, 0x47),
        )?,
        MethodKind::GradShap => {
            let baselines = gaussian_baselines(img.h, img.w, a.shap_baselines, frozen_seed);
            attribution::gradient_shap(
                &frozen,
                img,
                &baselines,
                target,
                a.shap_samples,
                seeds::derive(frozen_seed, 0x48),
            )?
        }
        MethodKind::GradCam => {
            let layer = a.gradcam_layer.unwrap_or(net.config.n_blocks - 1);
            attribution::grad_cam(net, frozen_seed, img, target, layer)?
        }
        MethodKind::Occlusion => attribution::occlusion(
            &frozen,
            img,
            0.0,
            target,
            (a.occlusion_window, a.occlusion_window),
            a.occlusion_stride,
        )?,
    };
    Ok(map)
}

/// Gaussian-noise baseline images (mean 0.5, std 0.2, clipped to [0, 1]).
pub fn gaussian_baselines(h: usize, w: usize, count: usize, seed: u64) -> Vec<ImageTensor> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    (0..count)
        .map(|i| {
            let mut rng = seeds::rng(seeds::derive2(seed, 0xBA5E, i as u64));
            let values: Vec<f32> = (0..h * w)
                .map(|_| {
                    let eps: f32 = rng.sample(StandardNormal);
                    (0.5 + 0.2 * eps).clamp(0.0, 1.0)
                })
                .collect();
            ImageTensor::new(values, h, w).expect("clipped values are valid")
        })
        .collect()
}

/// Compare this run's sweep against another run's; writes comparison tables
/// into this run's report directory and returns the rows.
pub fn compare_runs(
    config: &ExperimentConfig,
    out: &Path,
    other_out: &Path,
) -> Result<Vec<eval::ComparisonRow>> {
    let keys = stage_keys(config);
    let mine = sweep_dir(out, &keys);
    require(&mine.join("reports.json"), "report")?;
    let other_sweep = find_single_sweep(other_out)?;

    let a = load_reports(&other_sweep)?;
    let b = load_reports(&mine)?;
    let rows = eval::compare_reports(&a, &b)?;
    let tag_a = a.first().map(|r| r.model_tag.clone()).unwrap_or_else(|| "a".into());
    let tag_b = b.first().map(|r| r.model_tag.clone()).unwrap_or_else(|| "b".into());

    let dir = report_dir(out, &keys);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("comparison.csv"), tables::comparison_to_csv(&rows, &tag_a, &tag_b))?;
    std::fs::write(
        dir.join("comparison.md"),
        tables::comparison_to_markdown(&rows, &tag_a, &tag_b),
    )?;
    Ok(rows)
}

fn find_single_sweep(out: &Path) -> Result<PathBuf> {
    let mut candidates = Vec::new();
    for entry in std::fs::read_dir(out)? {
        let path = entry?.path();
        if path.is_dir()
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("sweep-"))
                .unwrap_or(false)
            && path.join("reports.json").exists()
        {
            candidates.push(path);
        }
    }
    match candidates.len() {
        0 => Err(PipelineError::MissingPrerequisite {
            stage: "report",
            path: out.join("sweep-*/reports.json"),
        }),
        1 => Ok(candidates.pop().unwrap()),
        _ => Err(PipelineError::Stage {
            stage: "report",
            msg: format!("{} sweep directories under {}; keep one", candidates.len(), out.display()),
        }),
    }
}

/// Exit status for a pipeline error, per the workbench contract: config
/// errors 2, missing prerequisites 3, anything else 1.
pub fn exit_code(err: &PipelineError) -> i32 {
    match err {
        PipelineError::Config(_) => 2,
        PipelineError::MissingPrerequisite { .. } => 3,
        _ => 1,
    }
}
