//! Run configuration: one TOML file with nested sections, validated in full
//! before any computation. `--set section.key=value` overrides any key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sosconv::conv::PathModel;
use sosconv::geometry::{make_default_schedule, ImagingGrid, PairSchedule, SteeringPair, WindowConfig};
use sosconv::inversion::{BeamformingConfig, InversionConfig};
use sosconv::learn::{LambdaScale, LearnMode, RegularizerSpec};
use sosconv::phantom::{BackgroundMode, PhantomFamily, PhantomSpec};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub width_m: f64,
    pub depth_m: f64,
    pub nx: usize,
    pub nz: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = ImagingGrid::desk();
        Self {
            width_m: g.width_m,
            depth_m: g.depth_m,
            nx: g.nx,
            nz: g.nz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// `[θ1, θ2]` in degrees.
    pub pairs: Vec<[f64; 2]>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            pairs: make_default_schedule()
                .pairs()
                .iter()
                .map(|p| [p.theta1_deg, p.theta2_deg])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Line,
    Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthSection {
    pub model: PathKind,
    pub f_number: f64,
    pub max_half_width_cells: f64,
}

impl Default for TruthSection {
    fn default() -> Self {
        let w = WindowConfig::default();
        Self {
            model: PathKind::Window,
            f_number: w.f_number,
            max_half_width_cells: w.max_half_width_cells,
        }
    }
}

impl TruthSection {
    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            f_number: self.f_number,
            max_half_width_cells: self.max_half_width_cells,
        }
    }

    pub fn path_model(&self) -> PathModel {
        match self.model {
            PathKind::Line => PathModel::Line,
            PathKind::Window => PathModel::Window(self.window()),
        }
    }

    pub fn id(&self) -> String {
        match self.model {
            PathKind::Line => "builtin:line".into(),
            PathKind::Window => "builtin:window".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub family: PhantomFamily,
    pub background_mode: BackgroundMode,
    pub background_sos_min: f64,
    pub background_sos_max: f64,
    pub smooth_amplitude: f64,
    pub min_contrast: f64,
    /// 0 picks the family default (10 m/s blob, 100 m/s geometric).
    pub max_contrast: f64,
    pub ring_width_m: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            family: PhantomFamily::Blob,
            background_mode: BackgroundMode::Mixed,
            background_sos_min: 1470.0,
            background_sos_max: 1550.0,
            smooth_amplitude: 5.0,
            min_contrast: 1.0,
            max_contrast: 0.0,
            ring_width_m: 5e-3,
            n_train: 32,
            n_val: 32,
            n_test: 32,
            noise_sigma: 5e-9,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Constrained,
    Unconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningSection {
    pub mode: ModeKind,
    pub n_c: usize,
    pub lambda_k: f64,
    pub lambda_f: f64,
    pub lambda_scale: LambdaScale,
    pub axial_weight: f64,
    pub lateral_weight: f64,
    pub pin_weight: f64,
}

impl Default for LearningSection {
    fn default() -> Self {
        let r = RegularizerSpec::default();
        Self {
            mode: ModeKind::Constrained,
            n_c: 21,
            lambda_k: r.lambda_k,
            lambda_f: r.lambda_f,
            lambda_scale: r.scale,
            axial_weight: r.axial_weight,
            lateral_weight: r.lateral_weight,
            pin_weight: r.pin_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RuntimeSection {
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
}


#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSection,
    pub schedule: ScheduleSection,
    pub beamforming: BeamformingConfig,
    pub truth: TruthSection,
    pub data: DataSection,
    pub learning: LearningSection,
    pub inversion: InversionConfig,
    pub runtime: RuntimeSection,
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.grid().map_err(|e| CliError::Config(format!("[grid] {e}")))?;
        self.schedule().map_err(|e| CliError::Config(format!("[schedule] {e}")))?;
        self.beamforming
            .validate()
            .map_err(|e| CliError::Config(format!("[beamforming] {e}")))?;
        self.truth
            .window()
            .validate()
            .map_err(|e| CliError::Config(format!("[truth] {e}")))?;
        self.phantom_spec()
            .and_then(|s| s.validate())
            .map_err(|e| CliError::Config(format!("[data] {e}")))?;
        if !(self.data.noise_sigma.is_finite() && self.data.noise_sigma >= 0.0) {
            return Err(CliError::Config("[data] noise_sigma must be >= 0".into()));
        }
        self.regularizer()
            .validate()
            .map_err(|e| CliError::Config(format!("[learning] {e}")))?;
        if self.learning.mode == ModeKind::Constrained && self.learning.n_c.is_multiple_of(2) {
            return Err(CliError::Config(format!(
                "[learning] n_c must be odd, got {}",
                self.learning.n_c
            )));
        }
        self.inversion
            .validate()
            .map_err(|e| CliError::Config(format!("[inversion] {e}")))?;
        Ok(())
    }

    pub fn grid(&self) -> sosconv::Result<ImagingGrid> {
        let g = &self.grid;
        ImagingGrid::new(g.width_m, g.depth_m, g.nx, g.nz)
    }

    pub fn schedule(&self) -> sosconv::Result<PairSchedule> {
        let pairs = self
            .schedule
            .pairs
            .iter()
            .map(|[a, b]| SteeringPair::new(*a, *b))
            .collect::<sosconv::Result<Vec<_>>>()?;
        PairSchedule::new(pairs)
    }

    pub fn phantom_spec(&self) -> sosconv::Result<PhantomSpec> {
        let grid = self.grid()?;
        let d = &self.data;
        let mut spec = match d.family {
            PhantomFamily::Blob => PhantomSpec::blob(grid, d.seed),
            PhantomFamily::Geometric => PhantomSpec::geometric(grid, d.seed),
        };
        spec.background_mode = d.background_mode;
        spec.background_sos_range = (d.background_sos_min, d.background_sos_max);
        spec.smooth_amplitude = d.smooth_amplitude;
        spec.min_contrast = d.min_contrast;
        if d.max_contrast > 0.0 {
            spec.max_contrast = d.max_contrast;
        }
        spec.ring_width_m = d.ring_width_m;
        Ok(spec)
    }

    pub fn regularizer(&self) -> RegularizerSpec {
        let l = &self.learning;
        RegularizerSpec {
            lambda_k: l.lambda_k,
            lambda_f: l.lambda_f,
            scale: l.lambda_scale,
            axial_weight: l.axial_weight,
            lateral_weight: l.lateral_weight,
            pin_weight: l.pin_weight,
        }
    }

    pub fn learn_mode(&self) -> LearnMode {
        match self.learning.mode {
            ModeKind::Constrained => LearnMode::Constrained { n_c: self.learning.n_c },
            ModeKind::Unconstrained => LearnMode::Unconstrained,
        }
    }

    /// Hex SHA-256 of the fully resolved configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key '{key}' is malformed")));
    }
    // Parse the value as TOML; fall back to a bare string.
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("nonempty");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
