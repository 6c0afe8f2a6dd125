use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sosconv::array_file::{read_header, write_array, ArrayHeader};
use sosconv::conv::{hand_crafted_model, DelayField};
use sosconv::inversion::reconstruct;
use sosconv::learn::learn_model;
use sosconv::metrics::{compare_models, evaluate_model, improvements_csv, rmse_sos, samples_csv, EvalReport, Improvement};
use sosconv::parallel;
use sosconv::phantom::{
    derive_seed, gen_blob_phantom, gen_geometric_phantom_with, make_splits, synthesize_observation, InclusionShape,
    PhantomFamily, Split,
};
use sosconv::Error;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::pgm;
use crate::store::{
    create_dir, eval_cases, load_model, pairs_of, read_delays, read_sample, save_model, training_samples,
    write_json, write_sample, DatasetManifest, ModelManifest, SampleData, SampleRecord,
};

fn short(hash: &str) -> &str {
    &hash[..12]
}

/// Phantoms, observations and the split manifest.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest, CliError> {
    let grid = cfg.grid()?;
    let schedule = cfg.schedule()?;
    let spec = cfg.phantom_spec()?;
    let truth = hand_crafted_model(&grid, &schedule, &cfg.truth.path_model())?;
    let hash = cfg.hash();
    let d = &cfg.data;
    let splits = make_splits(d.n_train, d.n_val, d.n_test, d.seed);
    create_dir(out)?;

    let generated = parallel::try_map(&splits, |rec| {
        let phantom = match d.family {
            PhantomFamily::Blob => gen_blob_phantom(&spec, rec.seed)?,
            PhantomFamily::Geometric => {
                let shape = if rec.id % 8 == 7 {
                    InclusionShape::Rectangle
                } else {
                    InclusionShape::Circle
                };
                gen_geometric_phantom_with(&spec, rec.seed, shape)?
            }
        };
        let obs = synthesize_observation(&phantom, &truth, &cfg.truth.id(), &cfg.beamforming, d.noise_sigma, derive_seed(rec.seed, 1))?;
        Ok::<_, Error>((phantom, obs))
    })?;

    let mut samples = Vec::with_capacity(splits.len());
    for (rec, (phantom, obs)) in splits.iter().zip(generated) {
        let path = format!("samples/{:04}", rec.id);
        let data = SampleData {
            sos: phantom.sos,
            slowness: obs.slowness,
            inclusion_mask: phantom.inclusion_mask,
            background_mask: phantom.background_mask,
            delays: obs.delays,
        };
        write_sample(&out.join(&path), &data, &grid, &schedule, rec.seed, &hash)?;
        samples.push(SampleRecord {
            id: rec.id,
            split: rec.split,
            seed: rec.seed,
            path,
            shape: phantom.meta.shape,
            contrast: phantom.meta.contrast,
        });
    }
    let family = match d.family {
        PhantomFamily::Blob => "blob",
        PhantomFamily::Geometric => "geometric",
    };
    let manifest = DatasetManifest {
        dataset_id: format!("{family}-{}", short(&hash)),
        config_hash: hash,
        family: d.family,
        grid,
        schedule: pairs_of(&schedule),
        truth_model: cfg.truth.id(),
        noise_sigma: d.noise_sigma,
        c0: cfg.beamforming.c0,
        seed: d.seed,
        samples,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn check_dataset(cfg: &RunConfig, m: &DatasetManifest) -> Result<(), CliError> {
    if m.grid != cfg.grid()? {
        return Err(CliError::data(format!("dataset {} uses a different grid than the config", m.dataset_id)));
    }
    if m.schedule != pairs_of(&cfg.schedule()?) {
        return Err(CliError::data(format!(
            "dataset {} schedule {:?} does not match config schedule {:?}",
            m.dataset_id,
            m.schedule,
            pairs_of(&cfg.schedule()?)
        )));
    }
    Ok(())
}

pub fn learn(cfg: &RunConfig, data: &Path, out: &Path, split: Split, limit: Option<usize>) -> Result<ModelManifest, CliError> {
    let manifest = DatasetManifest::load(data)?;
    check_dataset(cfg, &manifest)?;
    let samples = training_samples(data, &manifest, split, limit)?;
    if samples.is_empty() {
        return Err(CliError::data(format!("dataset {} has no {:?} samples", manifest.dataset_id, split)));
    }
    let grid = cfg.grid()?;
    let schedule = cfg.schedule()?;
    let mode = cfg.learn_mode();
    let reg = cfg.regularizer();
    let (model, report, learned) = learn_model(&samples, &grid, &schedule, mode, &reg)?;
    let hash = cfg.hash();
    let dims = model.dims();
    let m = ModelManifest {
        model_id: format!("{}-{}-n{}", mode.name(), short(&hash), samples.len()),
        config_hash: hash,
        mode,
        grid,
        schedule: pairs_of(&schedule),
        kernel_dims: [dims.kz, dims.kx],
        regularizer: reg,
        training_dataset: manifest.dataset_id.clone(),
        report,
        kernels: (0..schedule.len()).map(|p| format!("kernel_{p:02}")).collect(),
    };
    save_model(out, &m, &learned)?;
    Ok(m)
}

#[derive(Debug, Serialize)]
pub struct ReconSummary {
    pub model_id: String,
    pub source: String,
    pub iterations: usize,
    pub converged: bool,
    pub l1_objective: f64,
    pub final_objective: f64,
    pub rmse_c: Option<f64>,
    pub config_hash: String,
}

pub enum DelaySource<'a> {
    Sample { data: &'a Path, id: usize },
    Directory(&'a Path),
}

pub fn reconstruct_cmd(cfg: &RunConfig, model_spec: &str, source: DelaySource<'_>, out: &Path) -> Result<ReconSummary, CliError> {
    let grid = cfg.grid()?;
    let schedule = cfg.schedule()?;
    let (model, model_id) = load_model(model_spec, cfg, &grid, &schedule)?;
    let (delays, truth, label): (Vec<DelayField>, Option<ndarray::Array2<f64>>, String) = match source {
        DelaySource::Sample { data, id } => {
            let manifest = DatasetManifest::load(data)?;
            check_dataset(cfg, &manifest)?;
            let rec = manifest
                .samples
                .iter()
                .find(|r| r.id == id)
                .ok_or_else(|| CliError::data(format!("dataset {} has no sample {id}", manifest.dataset_id)))?;
            let s = read_sample(data, rec, &manifest)?;
            (s.delays, Some(s.sos), format!("{}#{id}", manifest.dataset_id))
        }
        DelaySource::Directory(dir) => (read_delays(dir, &schedule, &grid)?, None, dir.display().to_string()),
    };
    let r = reconstruct(&model, &delays, &cfg.beamforming, &cfg.inversion)?;
    let hash = cfg.hash();
    create_dir(out)?;
    let h = |role: &str, units: &str| {
        ArrayHeader::new(role, units)
            .with_spacing(grid.dz(), grid.dx())
            .with_config_hash(&hash)
            .with_meta("model", serde_json::json!(model_id))
    };
    write_array(&out.join("slowness"), &r.slowness, &h("relative_slowness", "s/m"))?;
    write_array(&out.join("sos"), &r.sos, &h("sos", "m/s"))?;
    let pgm_path = out.join("sos.pgm");
    fs::write(&pgm_path, pgm::encode(&r.sos, cfg.beamforming.c0)).map_err(|e| Error::io(&pgm_path, e))?;
    let mut trace = String::from("iteration,objective\n");
    for (i, v) in r.objective_trace.iter().enumerate() {
        trace.push_str(&format!("{i},{v:e}\n"));
    }
    let trace_path = out.join("objective.csv");
    fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;
    let summary = ReconSummary {
        model_id,
        source: label,
        iterations: r.iterations,
        converged: r.converged,
        l1_objective: r.l1_objective,
        final_objective: *r.objective_trace.last().expect("trace has a start value"),
        rmse_c: truth.as_ref().map(|t| rmse_sos(t, &r.sos)).transpose()?,
        config_hash: hash,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub dataset_id: String,
    pub split: Split,
    pub config_hash: String,
    pub reports: Vec<ReportSummary>,
    pub improvements: Vec<Improvement>,
}

#[derive(Debug, Serialize)]
pub struct ReportSummary {
    pub model_id: String,
    pub median_rmse_t: f64,
    pub median_rmse_c: f64,
    pub median_delta_sos: f64,
    pub n_samples: usize,
}

impl From<&EvalReport> for ReportSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            model_id: r.model_id.clone(),
            median_rmse_t: r.rmse_t,
            median_rmse_c: r.rmse_c,
            median_delta_sos: r.delta_sos,
            n_samples: r.samples.len(),
        }
    }
}

/// Evaluates each model on one split; with two or more models, every model
/// after the first is compared against the first.
pub fn evaluate(cfg: &RunConfig, data: &Path, model_specs: &[String], split: Split, out: &Path) -> Result<EvalSummary, CliError> {
    if model_specs.is_empty() {
        return Err(CliError::Config("at least one --model is required".into()));
    }
    let manifest = DatasetManifest::load(data)?;
    check_dataset(cfg, &manifest)?;
    let grid = cfg.grid()?;
    let schedule = cfg.schedule()?;
    let cases = eval_cases(data, &manifest, split)?;
    if cases.is_empty() {
        return Err(CliError::data(format!("dataset {} has no {:?} samples", manifest.dataset_id, split)));
    }
    let models = model_specs
        .iter()
        .map(|s| load_model(s, cfg, &grid, &schedule))
        .collect::<Result<Vec<_>, _>>()?;
    let (reports, imps) = if models.len() == 1 {
        let (m, id) = &models[0];
        (
            vec![evaluate_model(m, id, &manifest.dataset_id, &cases, &cfg.beamforming, &cfg.inversion)?],
            Vec::new(),
        )
    } else {
        let named: Vec<(String, &sosconv::ForwardModel)> = models.iter().map(|(m, id)| (id.clone(), m)).collect();
        let c = compare_models(&named, &manifest.dataset_id, &cases, &cfg.beamforming, &cfg.inversion)?;
        (c.reports, c.improvements)
    };
    create_dir(out)?;
    let write = |name: &str, text: String| -> Result<(), CliError> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(())
    };
    write("samples.csv", samples_csv(&reports))?;
    if !imps.is_empty() {
        write("improvements.csv", improvements_csv(&imps))?;
    }
    let summary = EvalSummary {
        dataset_id: manifest.dataset_id.clone(),
        split,
        config_hash: cfg.hash(),
        reports: reports.iter().map(ReportSummary::from).collect(),
        improvements: imps,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Human-readable description of a dataset, model or array file.
pub fn info(path: &Path) -> Result<String, CliError> {
    if path.join("manifest.json").is_file() {
        let m = DatasetManifest::load(path)?;
        let count = |s: Split| m.split(s).len();
        return Ok(format!(
            "dataset {}\n  family {:?}, grid {}x{} ({} x {} m), {} pairs\n  truth {}, noise {:e} s, c0 {} m/s, seed {}\n  samples: {} train, {} val, {} test\n  config {}",
            m.dataset_id,
            m.family,
            m.grid.nx,
            m.grid.nz,
            m.grid.width_m,
            m.grid.depth_m,
            m.schedule.len(),
            m.truth_model,
            m.noise_sigma,
            m.c0,
            m.seed,
            count(Split::Train),
            count(Split::Val),
            count(Split::Test),
            m.config_hash
        ));
    }
    if path.join("model.json").is_file() {
        let text = fs::read_to_string(path.join("model.json")).map_err(|e| Error::io(path, e))?;
        let m: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut s = format!(
            "model {}\n  mode {}, kernel {}x{}, trained on {} ({} samples)\n",
            m.model_id,
            m.mode.name(),
            m.kernel_dims[0],
            m.kernel_dims[1],
            m.training_dataset,
            m.report.n_samples
        );
        for p in &m.report.pairs {
            s.push_str(&format!(
                "  {}: fit rmse_t {:.3e} s, residual {:.1e}, lambda {:.3e}\n",
                p.pair, p.fit_rmse_t, p.relative_residual, p.lambda
            ));
        }
        s.push_str(&format!("  config {}", m.config_hash));
        return Ok(s);
    }
    let stem: PathBuf = path.with_extension("");
    let h = read_header(&stem)?;
    Ok(serde_json::to_string_pretty(&h).map_err(|e| Error::Format(e.to_string()))?)
}
