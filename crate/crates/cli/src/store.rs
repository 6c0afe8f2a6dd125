//! Dataset and model directories.
//!
//! A dataset is `manifest.json` plus `samples/NNNN/` holding `sos`,
//! `slowness`, `inclusion_mask`, `background_mask` and one `delays_PP` array
//! per steering pair. A model is `model.json` plus one `kernel_PP` array per
//! pair (and `profile_PP` for constrained models). Paths inside manifests are
//! relative to the directory root.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sosconv::array_file::{read_array, read_mask, write_array, write_mask, ArrayHeader};
use sosconv::conv::{hand_crafted_model, DelayField, ForwardModel, Kernel, PathModel};
use sosconv::geometry::{ImagingGrid, PairSchedule, SteeringPair};
use sosconv::learn::{LearnMode, LearnReport, LearnedKernel, RegularizerSpec, TrainingSample};
use sosconv::metrics::EvalCase;
use sosconv::phantom::{InclusionShape, PhantomFamily, Split};
use sosconv::Error;

use crate::config::RunConfig;
use crate::error::CliError;

pub fn pairs_of(schedule: &PairSchedule) -> Vec<[f64; 2]> {
    schedule.pairs().iter().map(|p| [p.theta1_deg, p.theta2_deg]).collect()
}

fn schedule_from(pairs: &[[f64; 2]]) -> sosconv::Result<PairSchedule> {
    PairSchedule::new(
        pairs
            .iter()
            .map(|[a, b]| SteeringPair::new(*a, *b))
            .collect::<sosconv::Result<Vec<_>>>()?,
    )
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    pub path: String,
    pub shape: InclusionShape,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub config_hash: String,
    pub family: PhantomFamily,
    pub grid: ImagingGrid,
    pub schedule: Vec<[f64; 2]>,
    pub truth_model: String,
    pub noise_sigma: f64,
    pub c0: f64,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        read_json(&dir.join("manifest.json"))
    }

    pub fn schedule(&self) -> sosconv::Result<PairSchedule> {
        schedule_from(&self.schedule)
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Everything stored for one sample.
pub struct SampleData {
    pub sos: Array2<f64>,
    pub slowness: Array2<f64>,
    pub inclusion_mask: Array2<bool>,
    pub background_mask: Array2<bool>,
    pub delays: Vec<DelayField>,
}

pub fn delay_stem(dir: &Path, p: usize) -> PathBuf {
    dir.join(format!("delays_{p:02}"))
}

pub fn header(role: &str, units: &str, grid: &ImagingGrid, seed: u64, hash: &str) -> ArrayHeader {
    ArrayHeader::new(role, units)
        .with_spacing(grid.dz(), grid.dx())
        .with_seed(seed)
        .with_config_hash(hash)
}

pub fn write_sample(dir: &Path, data: &SampleData, grid: &ImagingGrid, schedule: &PairSchedule, seed: u64, hash: &str) -> Result<(), CliError> {
    create_dir(dir)?;
    write_array(&dir.join("sos"), &data.sos, &header("sos", "m/s", grid, seed, hash))?;
    write_array(&dir.join("slowness"), &data.slowness, &header("relative_slowness", "s/m", grid, seed, hash))?;
    write_mask(&dir.join("inclusion_mask"), &data.inclusion_mask, &header("inclusion_mask", "1", grid, seed, hash))?;
    write_mask(&dir.join("background_mask"), &data.background_mask, &header("background_mask", "1", grid, seed, hash))?;
    for (p, (d, pair)) in data.delays.iter().zip(schedule.pairs()).enumerate() {
        let h = header("delays", "s", grid, seed, hash).with_meta("pair", serde_json::json!([pair.theta1_deg, pair.theta2_deg]));
        write_array(&delay_stem(dir, p), &d.values, &h)?;
    }
    Ok(())
}

/// Reads `delays_PP` for every pair; a missing file is reported by pair.
pub fn read_delays(dir: &Path, schedule: &PairSchedule, grid: &ImagingGrid) -> Result<Vec<DelayField>, CliError> {
    schedule
        .pairs()
        .iter()
        .enumerate()
        .map(|(p, pair)| {
            let stem = delay_stem(dir, p);
            let (values, _) = read_array(&stem)
                .map_err(|e| Error::Data(format!("delays for pair {pair} ({}): {e}", stem.display())))?;
            grid.check_shape(&format!("delays for pair {pair}"), values.shape())?;
            Ok(DelayField::new(values))
        })
        .collect()
}

pub fn read_sample(root: &Path, rec: &SampleRecord, manifest: &DatasetManifest) -> Result<SampleData, CliError> {
    let dir = root.join(&rec.path);
    let grid = manifest.grid;
    let ctx = |e: Error| CliError::Core(e.context(format!("sample {}", rec.id)));
    let (sos, _) = read_array(&dir.join("sos")).map_err(ctx)?;
    let (slowness, _) = read_array(&dir.join("slowness")).map_err(ctx)?;
    let (inclusion_mask, _) = read_mask(&dir.join("inclusion_mask")).map_err(ctx)?;
    let (background_mask, _) = read_mask(&dir.join("background_mask")).map_err(ctx)?;
    for (what, shape) in [("sos", sos.shape()), ("slowness", slowness.shape())] {
        grid.check_shape(what, shape).map_err(ctx)?;
    }
    let delays = read_delays(&dir, &manifest.schedule()?, &grid)?;
    Ok(SampleData {
        sos,
        slowness,
        inclusion_mask,
        background_mask,
        delays,
    })
}

pub fn training_samples(root: &Path, manifest: &DatasetManifest, split: Split, limit: Option<usize>) -> Result<Vec<TrainingSample>, CliError> {
    let recs = manifest.split(split);
    let take = limit.unwrap_or(recs.len()).min(recs.len());
    recs[..take]
        .iter()
        .map(|r| {
            let s = read_sample(root, r, manifest)?;
            Ok(TrainingSample {
                slowness: s.slowness,
                delays: s.delays,
            })
        })
        .collect()
}

pub fn eval_cases(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<EvalCase>, CliError> {
    manifest
        .split(split)
        .iter()
        .map(|r| {
            let s = read_sample(root, r, manifest)?;
            Ok(EvalCase {
                id: r.id,
                sos: s.sos,
                inclusion_mask: s.inclusion_mask,
                background_mask: s.background_mask,
                delays: s.delays,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model_id: String,
    pub config_hash: String,
    pub mode: LearnMode,
    pub grid: ImagingGrid,
    pub schedule: Vec<[f64; 2]>,
    /// `[kz, kx]`.
    pub kernel_dims: [usize; 2],
    pub regularizer: RegularizerSpec,
    pub training_dataset: String,
    pub report: LearnReport,
    pub kernels: Vec<String>,
}

pub fn save_model(dir: &Path, manifest: &ModelManifest, learned: &[LearnedKernel]) -> Result<(), CliError> {
    create_dir(dir)?;
    let grid = manifest.grid;
    for (p, (l, name)) in learned.iter().zip(&manifest.kernels).enumerate() {
        let pair = l.kernel.pair;
        let h = ArrayHeader::new("kernel", "m")
            .with_spacing(grid.dz(), grid.dx())
            .with_config_hash(&manifest.config_hash)
            .with_meta("pair", serde_json::json!([pair.theta1_deg, pair.theta2_deg]));
        write_array(&dir.join(name), &l.kernel.values, &h)?;
        if let Some(profile) = &l.profile {
            let h = ArrayHeader::new("profile", "1")
                .with_config_hash(&manifest.config_hash)
                .with_meta("pair", serde_json::json!([pair.theta1_deg, pair.theta2_deg]));
            write_array(&dir.join(format!("profile_{p:02}")), &profile.values, &h)?;
        }
    }
    write_json(&dir.join("model.json"), manifest)
}

/// Resolves `builtin:line`, `builtin:window` or a model directory.
pub fn load_model(spec: &str, cfg: &RunConfig, grid: &ImagingGrid, schedule: &PairSchedule) -> Result<(ForwardModel, String), CliError> {
    let builtin = match spec {
        "builtin:line" => Some(PathModel::Line),
        "builtin:window" => Some(PathModel::Window(cfg.truth.window())),
        _ => None,
    };
    if let Some(b) = builtin {
        return Ok((hand_crafted_model(grid, schedule, &b)?, spec.to_string()));
    }
    if spec.starts_with("builtin:") {
        return Err(CliError::Config(format!("unknown builtin model '{spec}' (use builtin:line or builtin:window)")));
    }
    let dir = Path::new(spec);
    let m: ModelManifest = read_json(&dir.join("model.json"))?;
    if m.grid != *grid {
        return Err(CliError::data(format!("model {} was learned on a different grid", m.model_id)));
    }
    if m.schedule != pairs_of(schedule) {
        return Err(CliError::data(format!(
            "model {} schedule {:?} does not match data schedule {:?}",
            m.model_id,
            m.schedule,
            pairs_of(schedule)
        )));
    }
    let kernels = schedule
        .pairs()
        .iter()
        .zip(&m.kernels)
        .map(|(&pair, name)| {
            let (values, _) = read_array(&dir.join(name))
                .map_err(|e| Error::Data(format!("kernel for pair {pair}: {e}")))?;
            Ok(Kernel::new(values, pair)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if kernels.len() != schedule.len() {
        return Err(CliError::data(format!("model {} lists {} kernels for {} pairs", m.model_id, m.kernels.len(), schedule.len())));
    }
    Ok((ForwardModel::new(*grid, kernels)?, m.model_id))
}
