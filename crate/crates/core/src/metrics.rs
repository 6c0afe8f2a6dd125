//! Reconstruction metrics and paired model comparisons.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::conv::{DelayField, ForwardModel};
use crate::error::{Error, Result};
use crate::inversion::{reconstruct, BeamformingConfig, InversionConfig};
use crate::parallel;
use crate::stats::{wilcoxon_signed_rank, WilcoxonResult};

/// Median; even lengths average the two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// `√ mean((c − c*)²)` over all pixels, m/s.
pub fn rmse_sos(truth: &Array2<f64>, recon: &Array2<f64>) -> Result<f64> {
    if truth.dim() != recon.dim() {
        return Err(Error::Shape(format!("truth {:?} vs recon {:?}", truth.dim(), recon.dim())));
    }
    if truth.is_empty() {
        return Err(Error::Data("empty SoS maps".into()));
    }
    let sum: f64 = truth.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sum / truth.len() as f64).sqrt())
}

/// `√ mean((L s − t)²)` over the valid entries of every pair, s.
pub fn rmse_delay(model: &ForwardModel, slowness: &Array2<f64>, delays: &[DelayField]) -> Result<f64> {
    if delays.len() != model.len() {
        return Err(Error::Shape(format!(
            "{} delay fields for a model with {} pairs",
            delays.len(),
            model.len()
        )));
    }
    let pred = model.apply(slowness)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, d) in pred.iter().zip(delays) {
        if d.values.dim() != p.dim() {
            return Err(Error::Shape(format!("delays {:?} vs grid {:?}", d.values.dim(), p.dim())));
        }
        for ((z, x), v) in p.indexed_iter() {
            if d.is_valid(z, x) {
                let r = v - d.values[[z, x]];
                sum += r * r;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("no valid delay entries".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// `|median(recon[inc]) − median(recon[bkg])|`, m/s.
pub fn delta_sos(recon: &Array2<f64>, inclusion: &Array2<bool>, background: &Array2<bool>) -> Result<f64> {
    if inclusion.dim() != recon.dim() || background.dim() != recon.dim() {
        return Err(Error::Shape("masks must match the SoS map".into()));
    }
    if inclusion.iter().zip(background).any(|(a, b)| *a && *b) {
        return Err(Error::Data("inclusion and background masks overlap".into()));
    }
    let pick = |m: &Array2<bool>| -> Vec<f64> { recon.iter().zip(m).filter(|(_, &k)| k).map(|(&v, _)| v).collect() };
    let inc = median(&pick(inclusion)).ok_or_else(|| Error::Data("empty inclusion mask".into()))?;
    let bkg = median(&pick(background)).ok_or_else(|| Error::Data("empty background mask".into()))?;
    Ok((inc - bkg).abs())
}

/// One labeled test sample: truth, region masks and measured delays.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub id: usize,
    pub sos: Array2<f64>,
    pub inclusion_mask: Array2<bool>,
    pub background_mask: Array2<bool>,
    pub delays: Vec<DelayField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: usize,
    pub rmse_t: f64,
    pub rmse_c: f64,
    pub delta_sos: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Whether the smoothed objective trace never rose.
    pub monotone: bool,
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    /// Medians over samples.
    pub rmse_t: f64,
    pub rmse_c: f64,
    pub delta_sos: f64,
    pub samples: Vec<SampleMetrics>,
}

/// Tolerance of the monotone-trace check, relative to the first value.
pub const TRACE_TOL: f64 = 1e-9;

pub fn trace_is_monotone(trace: &[f64]) -> bool {
    let tol = TRACE_TOL * trace.first().copied().unwrap_or(0.0).abs();
    trace.windows(2).all(|w| w[1] <= w[0] + tol)
}

/// Reconstructs every case with `model` and tabulates its metrics.
pub fn evaluate_model(
    model: &ForwardModel,
    model_id: &str,
    dataset_id: &str,
    cases: &[EvalCase],
    bf: &BeamformingConfig,
    inv: &InversionConfig,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Data(format!("dataset {dataset_id} has no test samples")));
    }
    let samples = parallel::try_map(cases, |c| {
        let r = reconstruct(model, &c.delays, bf, inv)
            .map_err(|e| e.context(format!("{dataset_id} sample {} with model {model_id}", c.id)))?;
        Ok::<_, Error>(SampleMetrics {
            id: c.id,
            rmse_t: rmse_delay(model, &r.slowness, &c.delays)?,
            rmse_c: rmse_sos(&c.sos, &r.sos)?,
            delta_sos: delta_sos(&r.sos, &c.inclusion_mask, &c.background_mask)?,
            iterations: r.iterations,
            converged: r.converged,
            monotone: trace_is_monotone(&r.objective_trace),
            objective_trace: r.objective_trace,
        })
    })?;
    let col = |f: fn(&SampleMetrics) -> f64| median(&samples.iter().map(f).collect::<Vec<_>>()).expect("nonempty");
    Ok(EvalReport {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        rmse_t: col(|s| s.rmse_t),
        rmse_c: col(|s| s.rmse_c),
        delta_sos: col(|s| s.delta_sos),
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RmseT,
    RmseC,
    DeltaSos,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::RmseT, Metric::RmseC, Metric::DeltaSos];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::RmseT => "rmse_t",
            Metric::RmseC => "rmse_c",
            Metric::DeltaSos => "delta_sos",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self, Metric::DeltaSos)
    }

    fn of(&self, s: &SampleMetrics) -> f64 {
        match self {
            Metric::RmseT => s.rmse_t,
            Metric::RmseC => s.rmse_c,
            Metric::DeltaSos => s.delta_sos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub model_id: String,
    pub baseline_id: String,
    pub metric: Metric,
    pub median_model: f64,
    pub median_baseline: f64,
    /// Improvement of the median relative to the baseline median, percent;
    /// positive means better.
    pub percent: f64,
    /// `200 (better − worse) / (|a| + |b|)`: flips sign when the two models
    /// are swapped.
    pub symmetric_percent: f64,
    /// Paired test on per-sample values (model minus baseline).
    pub wilcoxon: WilcoxonResult,
}

/// Paired comparison of `model` against `baseline` on the same samples.
pub fn improvements(model: &EvalReport, baseline: &EvalReport) -> Result<Vec<Improvement>> {
    if model.samples.len() != baseline.samples.len()
        || model.samples.iter().zip(&baseline.samples).any(|(a, b)| a.id != b.id)
    {
        return Err(Error::Data("reports cover different samples".into()));
    }
    Metric::ALL
        .iter()
        .map(|&metric| {
            let a: Vec<f64> = model.samples.iter().map(|s| metric.of(s)).collect();
            let b: Vec<f64> = baseline.samples.iter().map(|s| metric.of(s)).collect();
            let (ma, mb) = (median(&a).expect("nonempty"), median(&b).expect("nonempty"));
            let gain = if metric.higher_is_better() { ma - mb } else { mb - ma };
            let percent = if mb != 0.0 { 100.0 * gain / mb.abs() } else { 0.0 };
            let denom = ma.abs() + mb.abs();
            let symmetric_percent = if denom > 0.0 { 200.0 * gain / denom } else { 0.0 };
            Ok(Improvement {
                model_id: model.model_id.clone(),
                baseline_id: baseline.model_id.clone(),
                metric,
                median_model: ma,
                median_baseline: mb,
                percent,
                symmetric_percent,
                wilcoxon: wilcoxon_signed_rank(&a, &b)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
    /// Every model after the first against the first (the baseline).
    pub improvements: Vec<Improvement>,
}

/// Evaluates every model on the same cases; the first model is the baseline.
pub fn compare_models(
    models: &[(String, &ForwardModel)],
    dataset_id: &str,
    cases: &[EvalCase],
    bf: &BeamformingConfig,
    inv: &InversionConfig,
) -> Result<Comparison> {
    if models.len() < 2 {
        return Err(Error::Parameter("comparison needs at least two models".into()));
    }
    let reports = models
        .iter()
        .map(|(id, m)| evaluate_model(m, id, dataset_id, cases, bf, inv))
        .collect::<Result<Vec<_>>>()?;
    let mut imps = Vec::new();
    for r in &reports[1..] {
        imps.extend(improvements(r, &reports[0])?);
    }
    Ok(Comparison {
        reports,
        improvements: imps,
    })
}

/// Per-sample table, one row per (model, sample).
pub fn samples_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("model,dataset,sample,rmse_t_s,rmse_c_mps,delta_sos_mps,iterations,converged,monotone\n");
    for r in reports {
        for s in &r.samples {
            out.push_str(&format!(
                "{},{},{},{:e},{},{},{},{},{}\n",
                r.model_id, r.dataset_id, s.id, s.rmse_t, s.rmse_c, s.delta_sos, s.iterations, s.converged, s.monotone
            ));
        }
    }
    out
}

/// Median improvements with their paired tests.
pub fn improvements_csv(imps: &[Improvement]) -> String {
    let mut out = String::from(
        "model,baseline,metric,median_model,median_baseline,improvement_pct,symmetric_pct,wilcoxon_n,wilcoxon_w_plus,wilcoxon_p,exact\n",
    );
    for i in imps {
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{},{},{},{},{:e},{}\n",
            i.model_id,
            i.baseline_id,
            i.metric.name(),
            i.median_model,
            i.median_baseline,
            i.percent,
            i.symmetric_percent,
            i.wilcoxon.n,
            i.wilcoxon.w_plus,
            i.wilcoxon.p_value,
            i.wilcoxon.exact
        ));
    }
    out
}
