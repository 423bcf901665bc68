//! Run configuration: one JSON document describing grid, views, encoder,
//! MLP, trainer, projector and phantom.
//!
//! Parsing is strict. Unknown keys are rejected with the closest valid key
//! as a suggestion, missing required fields are reported by their full path,
//! and every section except `volume` and `geometry` may be omitted.

use std::fmt::Write as _;
use std::path::PathBuf;

use coronet_core::field::{EncoderConfig, FieldConfig};
use coronet_core::frequency::FrequencyConfig;
use coronet_core::geometry::{GridSpec, ProjectionGeometry};
use coronet_core::hash_encoding::HashEncoderConfig;
use coronet_core::mlp::{MlpConfig, SkipMode};
use coronet_core::phantom::PhantomSpec;
use coronet_core::projector::ProjectorConfig;
use coronet_core::trainer::{LossNorm, TrainConfig};
use coronet_core::{ExecConfig, Reduction};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub volume: VolumeSection,
    pub geometry: GeometrySection,
    /// View pair used when no `--views` flag is given.
    #[serde(default)]
    pub views: ViewSet,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub mlp: MlpSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub projector: ProjectorSection,
    #[serde(default)]
    pub phantom: PhantomSection,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seed of parameter initialization.
    #[serde(default)]
    pub seed: u64,
    /// Fixed-order reductions everywhere; bitwise reproducible.
    #[serde(default)]
    pub deterministic: bool,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSection {
    pub voxels: [usize; 3],
    pub spacing_mm: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub dsd_mm: f64,
    pub dso_mm: f64,
    pub primary_deg: f64,
    pub secondary_deg: f64,
    pub det_pixels: [usize; 2],
    pub det_spacing_mm: [f64; 2],
}

impl ViewSpec {
    pub fn to_geometry(&self) -> ProjectionGeometry {
        ProjectionGeometry {
            dsd: self.dsd_mm,
            dso: self.dso_mm,
            primary_deg: self.primary_deg,
            secondary_deg: self.secondary_deg,
            det_u: self.det_pixels[0],
            det_v: self.det_pixels[1],
            du: self.det_spacing_mm[0],
            dv: self.det_spacing_mm[1],
        }
    }

    pub fn from_geometry(g: &ProjectionGeometry) -> Self {
        Self {
            dsd_mm: g.dsd,
            dso_mm: g.dso,
            primary_deg: g.primary_deg,
            secondary_deg: g.secondary_deg,
            det_pixels: [g.det_u, g.det_v],
            det_spacing_mm: [g.du, g.dv],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub clinical: [ViewSpec; 2],
    /// Defaults to the clinical distances and detectors rotated to
    /// (0°, 0°) and (90°, 0°).
    #[serde(default)]
    pub orthogonal: Option<[ViewSpec; 2]>,
}

impl GeometrySection {
    pub fn views(&self, set: ViewSet) -> [ViewSpec; 2] {
        match set {
            ViewSet::Clinical => self.clinical,
            ViewSet::Orthogonal => self.orthogonal.unwrap_or_else(|| {
                let [mut a, mut b] = self.clinical;
                (a.primary_deg, a.secondary_deg) = (0.0, 0.0);
                (b.primary_deg, b.secondary_deg) = (90.0, 0.0);
                [a, b]
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ViewSet {
    #[default]
    Clinical,
    Orthogonal,
}

impl ViewSet {
    pub fn name(self) -> &'static str {
        match self {
            ViewSet::Clinical => "clinical",
            ViewSet::Orthogonal => "orthogonal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Hash,
    Frequency,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Hash => "hash",
            EncoderKind::Frequency => "frequency",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    pub hash: HashSection,
    pub frequency: FrequencySection,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { kind: EncoderKind::Hash, hash: HashSection::default(), frequency: FrequencySection::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashSection {
    pub levels: usize,
    pub log2_table_size: u32,
    pub features: usize,
    pub base_resolution: usize,
    pub growth: f64,
}

impl Default for HashSection {
    fn default() -> Self {
        let d = HashEncoderConfig::default();
        Self {
            levels: d.levels,
            log2_table_size: d.log2_table_size,
            features: d.features,
            base_resolution: d.base_resolution,
            growth: d.growth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrequencySection {
    pub frequencies: usize,
}

impl Default for FrequencySection {
    fn default() -> Self {
        Self { frequencies: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipKind {
    #[default]
    Concat,
    Add,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSection {
    pub layers: usize,
    pub hidden_width: usize,
    pub leaky_slope: f64,
    pub skip: SkipKind,
    /// Layer receiving the skip input; `layers / 2` when absent.
    pub skip_layer: Option<usize>,
}

impl Default for MlpSection {
    fn default() -> Self {
        let d = MlpConfig::with_input(1);
        Self { layers: d.n_layers, hidden_width: d.hidden_width, leaky_slope: d.leaky_slope, skip: SkipKind::Concat, skip_layer: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormKind {
    /// Mean over all detector pixels of all views.
    #[default]
    PixelCount,
    /// Sum divided by one view's pixel count.
    PixelsPerView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub iterations: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub log_every: usize,
    pub thresholds: Vec<f64>,
    pub metric_threshold: f64,
    pub loss_norm: LossNormKind,
    pub operator_budget_mb: usize,
    /// Iterations between snapshot files; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            iterations: d.iterations,
            lr: d.lr,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            log_every: d.log_every,
            thresholds: d.binarize_thresholds,
            metric_threshold: d.metric_threshold,
            loss_norm: LossNormKind::PixelCount,
            operator_budget_mb: d.operator_budget_bytes >> 20,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorSection {
    /// Ray-marching step; half the smallest voxel spacing when absent.
    pub step_mm: Option<f64>,
    /// Standard deviation of additive Gaussian noise on simulated
    /// projections. Zero simulates noise-free data.
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub seed: u64,
    pub n_branches: usize,
    /// Grid-dependent default when absent.
    pub radius_root_mm: Option<f64>,
    pub radius_taper: f64,
    pub branch_angle_deg: [f64; 2],
    pub control_points: usize,
    /// Grid-dependent default when absent.
    pub tortuosity_mm: Option<f64>,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let d = PhantomSpec::new(GridSpec::cubic(1, 1.0).expect("unit grid"), 0);
        Self {
            seed: 0,
            n_branches: d.n_branches,
            radius_root_mm: None,
            radius_taper: d.radius_taper,
            branch_angle_deg: [d.branch_angle_range_deg.0, d.branch_angle_range_deg.1],
            control_points: d.control_points,
            tortuosity_mm: None,
        }
    }
}

/// Parse and fully validate a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(describe_parse_error)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

fn describe_parse_error(err: serde_path_to_error::Error<serde_json::Error>) -> CliError {
    let path = err.path().to_string();
    let parent = if path == "." { String::new() } else { path };
    let inner = err.inner().to_string();
    let join = |key: &str| if parent.is_empty() { key.to_string() } else { format!("{parent}.{key}") };
    let ticked = backticked(&inner);
    let msg = if inner.starts_with("unknown field") && !ticked.is_empty() {
        let key = &ticked[0];
        let mut m = format!("unknown key `{}`", join(key));
        if let Some(best) = nearest_key(key, &ticked[1..]) {
            let _ = write!(m, "; did you mean `{best}`?");
        }
        m
    } else if inner.starts_with("missing field") && !ticked.is_empty() {
        format!("missing required field `{}`", join(&ticked[0]))
    } else if parent.is_empty() {
        inner
    } else {
        format!("{parent}: {inner}")
    };
    CliError::Config(msg)
}

/// Names quoted as `name` in a serde message, in order.
fn backticked(msg: &str) -> Vec<String> {
    msg.split('`').skip(1).step_by(2).map(str::to_string).collect()
}

fn nearest_key(key: &str, candidates: &[String]) -> Option<String> {
    candidates
        .iter()
        .map(|c| (strsim::jaro_winkler(key, c), c))
        .filter(|(s, _)| *s >= 0.6)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c.clone())
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn core_err(section: &str, e: coronet_core::Error) -> CliError {
    match e {
        coronet_core::Error::Invalid { field, reason } => config_err(format!("{section}.{field}: {reason}")),
        e => config_err(format!("{section}: {e}")),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        for set in [ViewSet::Clinical, ViewSet::Orthogonal] {
            for (i, v) in self.geometry.views(set).iter().enumerate() {
                let section = format!("geometry.{}[{i}]", set.name());
                if v.dsd_mm <= v.dso_mm {
                    return Err(config_err(format!(
                        "{section}.dsd_mm ({}) must be greater than {section}.dso_mm ({})",
                        v.dsd_mm, v.dso_mm
                    )));
                }
                v.to_geometry().validate().map_err(|e| core_err(&section, e))?;
            }
        }
        self.field_config_for(self.encoder.kind).validate().map_err(|e| core_err("encoder/mlp", e))?;
        self.train_config().validate().map_err(|e| core_err("trainer", e))?;
        if let Some(s) = self.projector.step_mm {
            if !(s > 0.0 && s.is_finite()) {
                return Err(config_err(format!("projector.step_mm: must be finite and > 0, got {s}")));
            }
        }
        if !(self.projector.noise_std >= 0.0 && self.projector.noise_std.is_finite()) {
            return Err(config_err(format!(
                "projector.noise_std: must be finite and >= 0, got {}",
                self.projector.noise_std
            )));
        }
        if self.threads == Some(0) {
            return Err(config_err("threads: must be >= 1"));
        }
        self.phantom_spec()?.validate().map_err(|e| core_err("phantom", e))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.volume.voxels, self.volume.spacing_mm).map_err(|e| core_err("volume", e))
    }

    pub fn geometries(&self, set: ViewSet) -> Vec<ProjectionGeometry> {
        self.geometry.views(set).iter().map(ViewSpec::to_geometry).collect()
    }

    /// Clinical range notes for the selected views; informational only.
    pub fn range_notes(&self, set: ViewSet) -> Vec<String> {
        self.geometries(set)
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.clinical_range_notes().into_iter().map(move |n| format!("view {i}: {n}")))
            .collect()
    }

    pub fn field_config_for(&self, kind: EncoderKind) -> FieldConfig {
        let encoder = match kind {
            EncoderKind::Hash => {
                let h = &self.encoder.hash;
                EncoderConfig::Hash(HashEncoderConfig {
                    levels: h.levels,
                    log2_table_size: h.log2_table_size,
                    features: h.features,
                    base_resolution: h.base_resolution,
                    growth: h.growth,
                    input_dim: 3,
                })
            }
            EncoderKind::Frequency => EncoderConfig::Frequency(FrequencyConfig { frequencies: self.encoder.frequency.frequencies }),
        };
        let m = &self.mlp;
        let mut cfg = FieldConfig::new(encoder, m.layers, m.hidden_width);
        cfg.mlp.leaky_slope = m.leaky_slope;
        cfg.mlp.skip = match m.skip {
            SkipKind::Concat => SkipMode::Concat,
            SkipKind::Add => SkipMode::Add,
            SkipKind::None => SkipMode::None,
        };
        cfg.mlp.skip_layer = m.skip_layer;
        cfg
    }

    pub fn field_config(&self) -> FieldConfig {
        self.field_config_for(self.encoder.kind)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.trainer;
        let loss_norm = match t.loss_norm {
            LossNormKind::PixelCount => LossNorm::PixelCount,
            LossNormKind::PixelsPerView => {
                let [a, _] = self.geometry.clinical;
                LossNorm::PixelsPerView(a.det_pixels[0] * a.det_pixels[1])
            }
        };
        TrainConfig {
            iterations: t.iterations,
            lr: t.lr,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            seed: self.seed,
            log_every: t.log_every,
            binarize_thresholds: t.thresholds.clone(),
            metric_threshold: t.metric_threshold,
            loss_norm,
            operator_budget_bytes: t.operator_budget_mb.saturating_mul(1 << 20),
        }
    }

    pub fn projector_config(&self) -> ProjectorConfig {
        ProjectorConfig { step_mm: self.projector.step_mm }
    }

    pub fn exec_config(&self) -> ExecConfig {
        let reduction = if self.deterministic { Reduction::Deterministic } else { Reduction::Fast };
        ExecConfig { reduction, ..ExecConfig::default() }
    }

    pub fn phantom_spec(&self) -> Result<PhantomSpec> {
        let p = &self.phantom;
        let mut spec = PhantomSpec::new(self.grid()?, p.seed);
        spec.n_branches = p.n_branches;
        if let Some(r) = p.radius_root_mm {
            spec.radius_root_mm = r;
        }
        spec.radius_taper = p.radius_taper;
        spec.branch_angle_range_deg = (p.branch_angle_deg[0], p.branch_angle_deg[1]);
        spec.control_points = p.control_points;
        if let Some(t) = p.tortuosity_mm {
            spec.tortuosity_mm = t;
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}
