use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Metric;
use crate::data::Dataset;
use crate::diffcore::{ParamStore, Tensor};
use crate::hvrnn::Model;
use crate::rng::derive_seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub metrics: Vec<Metric>,
    /// Keep per-timestep curves in the report.
    pub per_timestep: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 20, metrics: Metric::ALL.to_vec(), per_timestep: true, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("eval.n_samples", "must be >= 1"));
        }
        if self.metrics.is_empty() {
            return Err(Error::config("eval.metrics", "at least one metric is required"));
        }
        Ok(())
    }
}

/// Something that samples futures from a context.
pub trait Predictor {
    /// `context` is `[D, C, H, W]`; returns `[N, T, C, H, W]`. Sample `n`
    /// must depend only on `(seed, n)` so sample sets nest as N grows.
    fn sample(&self, context: &Tensor<f32>, horizon: usize, n: usize, seed: u64) -> Result<Tensor<f32>>;
}

/// Prior sampling from a trained model.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore<f32>,
}

impl Predictor for ModelPredictor<'_> {
    fn sample(&self, context: &Tensor<f32>, horizon: usize, n: usize, seed: u64) -> Result<Tensor<f32>> {
        let mut shape = vec![1];
        shape.extend_from_slice(context.shape());
        let out = self.model.generate(self.store, &context.clone().reshape(&shape)?, horizon, n, seed, false)?;
        let s = out.shape()[1..].to_vec();
        out.reshape(&s)
    }
}

/// Baseline that repeats the last context frame.
pub struct CopyLastFrame;

impl Predictor for CopyLastFrame {
    fn sample(&self, context: &Tensor<f32>, horizon: usize, n: usize, _seed: u64) -> Result<Tensor<f32>> {
        let (d, c, h, w) = context.dims4()?;
        let last = context.narrow(0, d - 1, 1)?;
        let reps: Vec<&Tensor<f32>> = vec![&last; n * horizon];
        Tensor::concat(&reps, 0)?.reshape(&[n, horizon, c, h, w])
    }
}

/// The selected sample of one sequence under one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScore {
    pub sequence_id: usize,
    pub best_index: usize,
    /// Metric averaged over the predicted frames.
    pub score: f64,
    /// Per-timestep metric of the selected sample (empty unless requested).
    pub curve: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation over sequences.
    pub std: f64,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub metric: Metric,
    pub sequences: Vec<SequenceScore>,
    pub aggregate: Aggregate,
    /// Mean over sequences of the selected curves, per timestep.
    pub mean_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestOfNReport {
    pub n_samples: usize,
    pub horizon: usize,
    pub metrics: Vec<MetricReport>,
}

impl BestOfNReport {
    pub fn get(&self, m: Metric) -> Option<&MetricReport> {
        self.metrics.iter().find(|r| r.metric == m)
    }
}

/// For each test sequence, draw N futures and keep, per metric, the sample
/// with the best frame-averaged score (lowest index on ties). Sequence `i`
/// uses seed `derive_seed(cfg.seed, i)`.
pub fn best_of_n(predictor: &dyn Predictor, data: &Dataset, cfg: &EvalConfig) -> Result<BestOfNReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("best_of_n", "no test sequences"));
    }
    let d = data.context_len;
    let horizon = data.sequences[0].shape()[0] - d;
    let mut reports: Vec<MetricReport> = cfg
        .metrics
        .iter()
        .map(|&metric| MetricReport { metric, sequences: Vec::new(), aggregate: Aggregate { mean: 0.0, std: 0.0 }, mean_curve: Vec::new() })
        .collect();
    for (i, seq) in data.sequences.iter().enumerate() {
        let context = seq.narrow(0, 0, d)?;
        let samples = predictor.sample(&context, horizon, cfg.n_samples, derive_seed(cfg.seed, i as u64))?;
        let frame_shape = seq.shape()[1..].to_vec();
        let expect: Vec<usize> = [cfg.n_samples, horizon].iter().chain(&frame_shape).copied().collect();
        if samples.shape() != expect.as_slice() {
            return Err(Error::contract("best_of_n", format!("predictor returned {:?}, expected {expect:?}", samples.shape())));
        }
        let truth: Vec<Tensor<f32>> = (0..horizon).map(|t| seq.narrow(0, d + t, 1)?.reshape(&frame_shape)).collect::<Result<_>>()?;
        let frame = truth[0].numel();
        for rep in reports.iter_mut() {
            let m = rep.metric;
            let mut best: Option<(usize, f64, Vec<f64>)> = None;
            for n in 0..cfg.n_samples {
                let curve: Vec<f64> = (0..horizon)
                    .map(|t| {
                        let start = (n * horizon + t) * frame;
                        let pred = Tensor::new(&frame_shape, samples.data()[start..start + frame].to_vec())?;
                        m.eval(&pred, &truth[t])
                    })
                    .collect::<Result<_>>()?;
                let score = curve.iter().sum::<f64>() / horizon as f64;
                let better = match &best {
                    None => true,
                    Some((_, b, _)) => if m.higher_is_better() { score > *b } else { score < *b },
                };
                if better {
                    best = Some((n, score, curve));
                }
            }
            let (best_index, score, curve) = best.expect("n_samples >= 1");
            rep.sequences.push(SequenceScore { sequence_id: i, best_index, score, curve });
        }
    }
    for rep in reports.iter_mut() {
        rep.aggregate = Aggregate::of(rep.sequences.iter().map(|s| s.score));
        let n = rep.sequences.len() as f64;
        rep.mean_curve = (0..horizon).map(|t| rep.sequences.iter().map(|s| s.curve[t]).sum::<f64>() / n).collect();
        if !cfg.per_timestep {
            rep.sequences.iter_mut().for_each(|s| s.curve.clear());
        }
    }
    Ok(BestOfNReport { n_samples: cfg.n_samples, horizon, metrics: reports })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `sequence_id,metric,best_sample_index,t1..tT` rows, plus a summary CSV
/// `metric,mean,std,sequences` next to it.
pub fn write_metrics_csv(report: &BestOfNReport, path: &Path, summary_path: &Path) -> Result<()> {
    let mut s = String::from("sequence_id,metric,best_sample_index");
    (1..=report.horizon).for_each(|t| write!(s, ",t{t}").expect("string write"));
    s.push('\n');
    for rep in &report.metrics {
        for q in &rep.sequences {
            write!(s, "{},{},{}", q.sequence_id, rep.metric.name(), q.best_index).expect("string write");
            q.curve.iter().for_each(|v| write!(s, ",{v}").expect("string write"));
            s.push('\n');
        }
    }
    write(path, &s)?;
    let mut sum = String::from("metric,mean,std,sequences\n");
    for rep in &report.metrics {
        writeln!(sum, "{},{},{},{}", rep.metric.name(), rep.aggregate.mean, rep.aggregate.std, rep.sequences.len()).expect("string write");
    }
    write(summary_path, &sum)
}

/// Plain-text `metric: mean ± std` lines.
pub fn write_summary(report: &BestOfNReport, path: &Path) -> Result<()> {
    let mut s = format!("best of {} samples, {} predicted frames\n", report.n_samples, report.horizon);
    for rep in &report.metrics {
        writeln!(s, "{}: {:.6} ± {:.6}", rep.metric.name().to_uppercase(), rep.aggregate.mean, rep.aggregate.std).expect("string write");
    }
    write(path, &s)
}
