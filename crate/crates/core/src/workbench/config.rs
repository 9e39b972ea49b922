//! Experiment configuration: a line-oriented, sectioned key-value file that
//! parses identically in any language and round-trips through
//! [`ExperimentConfig::serialize`] unchanged.

use sha2::{Digest, Sha256};

use crate::signalgen::{AmMod, DeviceProfile, Harmonic};
use crate::spectral::WindowKind;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{field}: {msg}")]
    Validation { field: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub n_classes: usize,
    pub sample_rate: f64,
    pub segment_len: usize,
    pub segments_per_class: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Notch filter center in Hz; 0 disables the filter.
    pub notch_center: f64,
    pub notch_quality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSection {
    pub name: String,
    pub harmonics: Vec<Harmonic>,
    pub am: Option<AmMod>,
    pub drift_ppm: f64,
    pub noise_floor: f64,
}

impl ProfileSection {
    pub fn to_device_profile(&self, class_id: usize) -> DeviceProfile {
        DeviceProfile {
            class_id,
            harmonics: self.harmonics.clone(),
            am_mod: self.am,
            drift_ppm: self.drift_ppm,
            noise_floor: self.noise_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSection {
    pub window_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub image_h: usize,
    pub image_w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub n_blocks: usize,
    pub channels: usize,
    pub stem_pool: usize,
    pub stochastic: bool,
    pub sde_sigma: f64,
    pub dt: f64,
    pub mc_samples: usize,
    pub train_noise: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub sigmas: Vec<f64>,
    pub mc_samples: usize,
}

/// Attribution methods surfaced by the workbench.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodKind {
    Ig,
    IgNt,
    GradShap,
    GradCam,
    Occlusion,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Ig => "ig",
            MethodKind::IgNt => "ig-nt",
            MethodKind::GradShap => "gradshap",
            MethodKind::GradCam => "gradcam",
            MethodKind::Occlusion => "occlusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ig" => Some(MethodKind::Ig),
            "ig-nt" => Some(MethodKind::IgNt),
            "gradshap" => Some(MethodKind::GradShap),
            "gradcam" => Some(MethodKind::GradCam),
            "occlusion" => Some(MethodKind::Occlusion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionSection {
    pub method: MethodKind,
    pub ig_steps: usize,
    pub nt_samples: usize,
    pub nt_sigma: f64,
    pub samples_per_class: usize,
    pub occlusion_window: usize,
    pub occlusion_stride: usize,
    pub shap_baselines: usize,
    pub shap_samples: usize,
    /// Block whose activation Grad-CAM explains; defaults to the last.
    pub gradcam_layer: Option<usize>,
    pub seed: u64,
}

/// Full experiment description; the unit of reproducibility.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub profiles: Vec<ProfileSection>,
    pub spectral: SpectralSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub attribution: AttributionSection,
}

impl ExperimentConfig {
    /// Canonical text form; `parse(serialize(c)) == c`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let d = &self.dataset;
        out.push_str("[dataset]\n");
        out.push_str(&format!("n_classes = {}\n", d.n_classes));
        out.push_str(&format!("sample_rate = {}\n", d.sample_rate));
        out.push_str(&format!("segment_len = {}\n", d.segment_len));
        out.push_str(&format!("segments_per_class = {}\n", d.segments_per_class));
        out.push_str(&format!("train_fraction = {}\n", d.train_fraction));
        out.push_str(&format!("seed = {}\n", d.seed));
        out.push_str(&format!("notch_center = {}\n", d.notch_center));
        out.push_str(&format!("notch_quality = {}\n", d.notch_quality));

        for (i, p) in self.profiles.iter().enumerate() {
            out.push_str(&format!("\n[profile.{i}]\n"));
            out.push_str(&format!("name = {}\n", p.name));
            let harmonics: Vec<String> = p
                .harmonics
                .iter()
                .map(|h| format!("{}:{}:{}", h.freq, h.amp, h.phase))
                .collect();
            out.push_str(&format!("harmonics = {}\n", harmonics.join(", ")));
            if let Some(am) = &p.am {
                out.push_str(&format!("am = {}:{}\n", am.rate, am.depth));
            }
            out.push_str(&format!("drift_ppm = {}\n", p.drift_ppm));
            out.push_str(&format!("noise_floor = {}\n", p.noise_floor));
        }

        let s = &self.spectral;
        out.push_str("\n[spectral]\n");
        out.push_str(&format!("window_size = {}\n", s.window_size));
        out.push_str(&format!("hop = {}\n", s.hop));
        out.push_str(&format!(
            "window = {}\n",
            match s.window {
                WindowKind::Hann => "hann",
                WindowKind::Rect => "rect",
            }
        ));
        out.push_str(&format!("image_h = {}\n", s.image_h));
        out.push_str(&format!("image_w = {}\n", s.image_w));

        let m = &self.model;
        out.push_str("\n[model]\n");
        out.push_str(&format!("n_blocks = {}\n", m.n_blocks));
        out.push_str(&format!("channels = {}\n", m.channels));
        out.push_str(&format!("stem_pool = {}\n", m.stem_pool));
        out.push_str(&format!("stochastic = {}\n", m.stochastic));
        out.push_str(&format!("sde_sigma = {}\n", m.sde_sigma));
        out.push_str(&format!("dt = {}\n", m.dt));
        out.push_str(&format!("mc_samples = {}\n", m.mc_samples));
        out.push_str(&format!("train_noise = {}\n", m.train_noise));

        let t = &self.train;
        out.push_str("\n[train]\n");
        out.push_str(&format!("epochs = {}\n", t.epochs));
        out.push_str(&format!("batch_size = {}\n", t.batch_size));
        out.push_str(&format!("lr = {}\n", t.lr));
        out.push_str(&format!("seed = {}\n", t.seed));

        let e = &self.eval;
        out.push_str("\n[eval]\n");
        let sigmas: Vec<String> = e.sigmas.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("sigmas = {}\n", sigmas.join(", ")));
        out.push_str(&format!("mc_samples = {}\n", e.mc_samples));

        let a = &self.attribution;
        out.push_str("\n[attribution]\n");
        out.push_str(&format!("method = {}\n", a.method.as_str()));
        out.push_str(&format!("ig_steps = {}\n", a.ig_steps));
        out.push_str(&format!("nt_samples = {}\n", a.nt_samples));
        out.push_str(&format!("nt_sigma = {}\n", a.nt_sigma));
        out.push_str(&format!("samples_per_class = {}\n", a.samples_per_class));
        out.push_str(&format!("occlusion_window = {}\n", a.occlusion_window));
        out.push_str(&format!("occlusion_stride = {}\n", a.occlusion_stride));
        out.push_str(&format!("shap_baselines = {}\n", a.shap_baselines));
        out.push_str(&format!("shap_samples = {}\n", a.shap_samples));
        if let Some(layer) = a.gradcam_layer {
            out.push_str(&format!("gradcam_layer = {layer}\n"));
        }
        out.push_str(&format!("seed = {}\n", a.seed));
        out
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.serialize().as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Parser::new(text).parse()
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| {
            Err(ConfigError::Validation { field: field.into(), msg })
        };
        let d = &self.dataset;
        if d.n_classes < 2 {
            return err("dataset.n_classes", format!("must be >= 2, got {}", d.n_classes));
        }
        if self.profiles.len() != d.n_classes {
            return err(
                "profile",
                format!("{} profiles declared for {} classes", self.profiles.len(), d.n_classes),
            );
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return err("dataset.train_fraction", format!("must be in (0, 1), got {}", d.train_fraction));
        }
        if d.sample_rate <= 0.0 {
            return err("dataset.sample_rate", "must be positive".into());
        }
        if d.segments_per_class == 0 {
            return err("dataset.segments_per_class", "must be >= 1".into());
        }
        let train_count = (d.train_fraction * d.segments_per_class as f64).floor() as usize;
        if train_count == 0 || train_count >= d.segments_per_class {
            return err(
                "dataset.train_fraction",
                format!("split leaves an empty side ({train_count} train of {})", d.segments_per_class),
            );
        }
        if d.notch_center < 0.0 || d.notch_center >= d.sample_rate / 2.0 {
            if d.notch_center != 0.0 {
                return err("dataset.notch_center", "must be 0 (off) or below Nyquist".into());
            }
        }
        let nyquist = d.sample_rate / 2.0;
        for (i, p) in self.profiles.iter().enumerate() {
            for h in &p.harmonics {
                if h.freq >= nyquist {
                    return err(
                        &format!("profile.{i}.harmonics"),
                        format!("frequency {} at/above Nyquist {}", h.freq, nyquist),
                    );
                }
                if h.amp < 0.0 {
                    return err(&format!("profile.{i}.harmonics"), "amplitude must be >= 0".into());
                }
            }
            if let Some(am) = &p.am {
                if !(0.0..=1.0).contains(&am.depth) {
                    return err(&format!("profile.{i}.am"), format!("depth must be in [0,1], got {}", am.depth));
                }
            }
            if p.noise_floor < 0.0 {
                return err(&format!("profile.{i}.noise_floor"), "must be >= 0".into());
            }
        }
        let s = &self.spectral;
        if s.window_size == 0 || !s.window_size.is_power_of_two() {
            return err("spectral.window_size", format!("must be a power of two, got {}", s.window_size));
        }
        if s.hop == 0 {
            return err("spectral.hop", "must be >= 1".into());
        }
        if d.segment_len < s.window_size {
            return err("dataset.segment_len", format!("must be >= window_size ({})", s.window_size));
        }
        if s.image_h == 0 || s.image_w == 0 {
            return err("spectral.image_h", "image dims must be >= 1".into());
        }
        let m = &self.model;
        self.residual_net_config().validate().map_err(|e| ConfigError::Validation {
            field: "model".into(),
            msg: e.to_string(),
        })?;
        if m.stochastic && m.sde_sigma == 0.0 && m.train_noise {
            // Legal (reduces to deterministic); nothing to flag.
        }
        let t = &self.train;
        if t.epochs == 0 {
            return err("train.epochs", "must be >= 1".into());
        }
        if t.batch_size == 0 {
            return err("train.batch_size", "must be >= 1".into());
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return err("train.lr", format!("must be finite and >= 0, got {}", t.lr));
        }
        let e = &self.eval;
        if e.sigmas.is_empty() {
            return err("eval.sigmas", "must list at least one sigma".into());
        }
        if e.sigmas.iter().any(|&v| v < 0.0) {
            return err("eval.sigmas", "sigmas must be >= 0".into());
        }
        if e.mc_samples == 0 {
            return err("eval.mc_samples", "must be >= 1".into());
        }
        let a = &self.attribution;
        if a.ig_steps == 0 {
            return err("attribution.ig_steps", "must be >= 1".into());
        }
        if a.nt_samples == 0 || a.shap_samples == 0 || a.shap_baselines == 0 {
            return err("attribution", "sample counts must be >= 1".into());
        }
        if a.samples_per_class == 0 {
            return err("attribution.samples_per_class", "must be >= 1".into());
        }
        if a.occlusion_window == 0
            || a.occlusion_window > s.image_h
            || a.occlusion_window > s.image_w
        {
            return err("attribution.occlusion_window", "must fit inside the image".into());
        }
        if a.occlusion_stride == 0 {
            return err("attribution.occlusion_stride", "must be >= 1".into());
        }
        if let Some(layer) = a.gradcam_layer {
            if layer >= m.n_blocks {
                return err(
                    "attribution.gradcam_layer",
                    format!("layer {layer} out of range for {} blocks", m.n_blocks),
                );
            }
        }
        Ok(())
    }

    /// Model configuration resolved against dataset and spectral sections.
    pub fn residual_net_config(&self) -> crate::model::ResidualNetConfig {
        crate::model::ResidualNetConfig {
            n_classes: self.dataset.n_classes,
            n_blocks: self.model.n_blocks,
            channels: self.model.channels,
            image_h: self.spectral.image_h,
            image_w: self.spectral.image_w,
            stem_pool: self.model.stem_pool,
            stochastic: self.model.stochastic,
            sde_sigma: self.model.sde_sigma as f32,
            dt: self.model.dt as f32,
            mc_samples: self.model.mc_samples,
            train_noise: self.model.train_noise,
        }
    }

    pub fn device_profiles(&self) -> Vec<DeviceProfile> {
        self.profiles
            .iter()
            .enumerate()
            .map(|(i, p)| p.to_device_profile(i))
            .collect()
    }

    /// Override every seed in the config with one root value.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.attribution.seed = seed;
    }

    /// The standard desk-scale six-class experiment. Classes are harmonic
    /// combs with distinct fundamentals, a spectral fingerprint that stays
    /// identifiable under heavy pixel noise.
    pub fn desk_scale(stochastic: bool) -> Self {
        // Amplitude/phase tables use short literals so the serialized
        // config stays human-readable.
        const AMPS: [f64; 5] = [1.0, 0.85, 0.75, 0.68, 0.62];
        const PHASES: [f64; 5] = [0.0, 0.7, 1.4, 2.1, 2.8];
        let comb = |name: &str, f0: f64, count: usize, noise_floor: f64| {
            let harmonics = (0..count)
                .map(|k| Harmonic {
                    freq: f0 * (k + 1) as f64,
                    amp: AMPS[k],
                    phase: PHASES[k],
                })
                .collect();
            ProfileSection {
                name: name.to_string(),
                harmonics,
                am: None,
                drift_ppm: 100.0,
                noise_floor,
            }
        };
        ExperimentConfig {
            dataset: DatasetSection {
                n_classes: 6,
                sample_rate: 8192.0,
                segment_len: 8192,
                segments_per_class: 100,
                train_fraction: 0.7,
                seed: 42,
                notch_center: 60.0,
                notch_quality: 5.0,
            },
            profiles: vec![
                comb("comb288", 288.0, 5, 0.05),
                comb("comb416", 416.0, 5, 0.05),
                comb("comb544", 544.0, 4, 0.06),
                comb("comb672", 672.0, 4, 0.05),
                comb("comb800", 800.0, 3, 0.06),
                comb("comb992", 992.0, 3, 0.05),
            ],
            spectral: SpectralSection {
                window_size: 256,
                hop: 128,
                window: WindowKind::Hann,
                image_h: 64,
                image_w: 64,
            },
            model: ModelSection {
                n_blocks: 4,
                channels: 16,
                stem_pool: 4,
                stochastic,
                sde_sigma: if stochastic { 0.25 } else { 0.0 },
                dt: 1.0,
                mc_samples: 8,
                train_noise: true,
            },
            train: TrainSection { epochs: 16, batch_size: 32, lr: 1e-3, seed: 42 },
            eval: EvalSection { sigmas: vec![0.1, 0.25, 0.5], mc_samples: 8 },
            attribution: AttributionSection {
                method: MethodKind::IgNt,
                ig_steps: 24,
                nt_samples: 6,
                nt_sigma: 0.1,
                samples_per_class: 5,
                occlusion_window: 8,
                occlusion_stride: 4,
                shap_baselines: 4,
                shap_samples: 64,
                gradcam_layer: None,
                seed: 42,
            },
        }
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Parser<'a> {
    lines: Vec<(usize, &'a str)>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, raw)| {
                let stripped = match raw.find('#') {
                    Some(pos) => &raw[..pos],
                    None => raw,
                };
                (i + 1, stripped.trim())
            })
            .filter(|(_, l)| !l.is_empty())
            .collect();
        Self { lines }
    }

    fn parse(self) -> Result<ExperimentConfig> {
        use std::collections::BTreeMap;
        let mut sections: Vec<(String, usize, BTreeMap<String, (usize, String)>)> = Vec::new();
        for (line_no, line) in &self.lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((name.trim().to_string(), *line_no, BTreeMap::new()));
            } else {
                let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                    line: *line_no,
                    msg: format!("expected 'key = value', got '{line}'"),
                })?;
                let section = sections.last_mut().ok_or_else(|| ConfigError::Parse {
                    line: *line_no,
                    msg: "key outside any [section]".into(),
                })?;
                section
                    .2
                    .insert(key.trim().to_string(), (*line_no, value.trim().to_string()));
            }
        }

        let find = |name: &str| -> Result<&BTreeMap<String, (usize, String)>> {
            sections
                .iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, _, kv)| kv)
                .ok_or_else(|| ConfigError::Parse { line: 0, msg: format!("missing [{name}] section") })
        };

        let dataset_kv = find("dataset")?;
        let dataset = DatasetSection {
            n_classes: get(dataset_kv, "n_classes")?,
            sample_rate: get(dataset_kv, "sample_rate")?,
            segment_len: get(dataset_kv, "segment_len")?,
            segments_per_class: get(dataset_kv, "segments_per_class")?,
            train_fraction: get(dataset_kv, "train_fraction")?,
            seed: get(dataset_kv, "seed")?,
            notch_center: get_or(dataset_kv, "notch_center", 0.0)?,
            notch_quality: get_or(dataset_kv, "notch_quality", 5.0)?,
        };

        let mut profiles = Vec::new();
        for i in 0..dataset.n_classes {
            let name = format!("profile.{i}");
            let kv = find(&name)?;
            profiles.push(parse_profile(kv, &name)?);
        }

        let s_kv = find("spectral")?;
        let window_str: String = get(s_kv, "window")?;
        let window = match window_str.as_str() {
            "hann" => WindowKind::Hann,
            "rect" => WindowKind::Rect,
            other => {
                return Err(ConfigError::Parse {
                    line: s_kv.get("window").map(|(l, _)| *l).unwrap_or(0),
                    msg: format!("unknown window '{other}' (expected hann|rect)"),
                })
            }
        };
        let spectral = SpectralSection {
            window_size: get(s_kv, "window_size")?,
            hop: get(s_kv, "hop")?,
            window,
            image_h: get(s_kv, "image_h")?,
            image_w: get(s_kv, "image_w")?,
        };

        let m_kv = find("model")?;
        let model = ModelSection {
            n_blocks: get(m_kv, "n_blocks")?,
            channels: get(m_kv, "channels")?,
            stem_pool: get_or(m_kv, "stem_pool", 1)?,
            stochastic: get(m_kv, "stochastic")?,
            sde_sigma: get(m_kv, "sde_sigma")?,
            dt: get(m_kv, "dt")?,
            mc_samples: get(m_kv, "mc_samples")?,
            train_noise: get(m_kv, "train_noise")?,
        };

        let t_kv = find("train")?;
        let train = TrainSection {
            epochs: get(t_kv, "epochs")?,
            batch_size: get(t_kv, "batch_size")?,
            lr: get(t_kv, "lr")?,
            seed: get(t_kv, "seed")?,
        };

        let e_kv = find("eval")?;
        let sigmas_str: String = get(e_kv, "sigmas")?;
        let sigmas = parse_list(&sigmas_str).map_err(|msg| ConfigError::Parse {
            line: e_kv.get("sigmas").map(|(l, _)| *l).unwrap_or(0),
            msg,
        })?;
        let eval = EvalSection { sigmas, mc_samples: get(e_kv, "mc_samples")? };

        let a_kv = find("attribution")?;
        let method_str: String = get(a_kv, "method")?;
        let method = MethodKind::parse(&method_str).ok_or_else(|| ConfigError::Parse {
            line: a_kv.get("method").map(|(l, _)| *l).unwrap_or(0),
            msg: format!("unknown method '{method_str}'"),
        })?;
        let gradcam_layer = match a_kv.get("gradcam_layer") {
            Some((line, v)) => Some(v.parse::<usize>().map_err(|e| ConfigError::Parse {
                line: *line,
                msg: format!("gradcam_layer: {e}"),
            })?),
            None => None,
        };
        let attribution = AttributionSection {
            method,
            ig_steps: get(a_kv, "ig_steps")?,
            nt_samples: get(a_kv, "nt_samples")?,
            nt_sigma: get(a_kv, "nt_sigma")?,
            samples_per_class: get(a_kv, "samples_per_class")?,
            occlusion_window: get(a_kv, "occlusion_window")?,
            occlusion_stride: get(a_kv, "occlusion_stride")?,
            shap_baselines: get(a_kv, "shap_baselines")?,
            shap_samples: get(a_kv, "shap_samples")?,
            gradcam_layer,
            seed: get(a_kv, "seed")?,
        };

        Ok(ExperimentConfig { dataset, profiles, spectral, model, train, eval, attribution })
    }
}

fn parse_profile(
    kv: &std::collections::BTreeMap<String, (usize, String)>,
    section: &str,
) -> Result<ProfileSection> {
    let name: String = get(kv, "name")?;
    let (h_line, h_value) = kv.get("harmonics").ok_or_else(|| ConfigError::Parse {
        line: 0,
        msg: format!("[{section}] missing key 'harmonics'"),
    })?;
    let mut harmonics = Vec::new();
    let trimmed = h_value.trim();
    if !trimmed.is_empty() {
        for part in trimmed.split(',') {
            let fields: Vec<&str> = part.trim().split(':').collect();
            if fields.len() != 3 {
                return Err(ConfigError::Parse {
                    line: *h_line,
                    msg: format!("harmonic '{part}' is not freq:amp:phase"),
                });
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.trim().parse().map_err(|e| ConfigError::Parse {
                    line: *h_line,
                    msg: format!("harmonic field '{s}': {e}"),
                })
            };
            harmonics.push(Harmonic {
                freq: parse_f(fields[0])?,
                amp: parse_f(fields[1])?,
                phase: parse_f(fields[2])?,
            });
        }
    }
    let am = match kv.get("am") {
        Some((line, v)) => {
            let fields: Vec<&str> = v.split(':').collect();
            if fields.len() != 2 {
                return Err(ConfigError::Parse {
                    line: *line,
                    msg: format!("am '{v}' is not rate:depth"),
                });
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.trim().parse().map_err(|e| ConfigError::Parse {
                    line: *line,
                    msg: format!("am field '{s}': {e}"),
                })
            };
            Some(AmMod { rate: parse_f(fields[0])?, depth: parse_f(fields[1])? })
        }
        None => None,
    };
    Ok(ProfileSection {
        name,
        harmonics,
        am,
        drift_ppm: get(kv, "drift_ppm")?,
        noise_floor: get(kv, "noise_floor")?,
    })
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse().map_err(|e| format!("'{part}': {e}"))?);
    }
    Ok(out)
}

trait FromConfigValue: Sized {
    fn from_value(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! impl_from_value {
    ($($t:ty),*) => {
        $(impl FromConfigValue for $t {
            fn from_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
        })*
    };
}
impl_from_value!(usize, u64, f64, bool, String);

fn get<T: FromConfigValue>(
    kv: &std::collections::BTreeMap<String, (usize, String)>,
    key: &str,
) -> Result<T> {
    let (line, value) = kv
        .get(key)
        .ok_or_else(|| ConfigError::Parse { line: 0, msg: format!("missing key '{key}'") })?;
    T::from_value(value).map_err(|msg| ConfigError::Parse {
        line: *line,
        msg: format!("{key}: {msg}"),
    })
}

fn get_or<T: FromConfigValue>(
    kv: &std::collections::BTreeMap<String, (usize, String)>,
    key: &str,
    default: T,
) -> Result<T> {
    match kv.get(key) {
        Some(_) => get(kv, key),
        None => Ok(default),
    }
}
