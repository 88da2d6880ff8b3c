//! One function per subcommand. Each is a pure function of the resolved
//! config, its filesystem inputs and the seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hvrnn::data::{
    load_mnist_idx, load_sequence_dir, save_sequence_dir, synthetic_digits, test_seeds, train_seed, write_pgm, Dataset, DigitSet,
    Image,
};
use hvrnn::diffcore::{ParamStore, Tensor};
use hvrnn::eval::{best_of_n, kl_activity, write_metrics_csv, write_summary, ModelPredictor};
use hvrnn::hvrnn::{preset, Model};
use hvrnn::train::{evaluate_elbo, load_checkpoint, train as run_training, BetaMode, CsvSink, TrainData, TrainState};
use hvrnn::Error;

use crate::config::{io, DigitSource, RunConfig, MNIST_IMAGES, MNIST_LABELS};
use crate::CliError;

fn config_err(field: &str, detail: impl Into<String>) -> CliError {
    CliError::Core(Error::Config { field: field.into(), detail: detail.into() })
}

pub fn load_digits(cfg: &RunConfig) -> Result<DigitSet, CliError> {
    let d = &cfg.data;
    let size = d.smmnist.digit_size;
    match d.digit_source {
        DigitSource::Mnist => {
            let dir = d.digits_dir.as_deref().ok_or_else(|| config_err("data.digits_dir", "not set"))?;
            Ok(load_mnist_idx(&dir.join(MNIST_IMAGES), &dir.join(MNIST_LABELS))?.resized(size)?)
        }
        DigitSource::Synthetic | DigitSource::Auto => Ok(synthetic_digits(d.synthetic_count, size, 0)),
    }
}

/// The fixed held-out sequences, generated or read from a `make-data` directory.
pub fn test_set(cfg: &RunConfig, digits: Option<&DigitSet>, dir: Option<&Path>) -> Result<Dataset, CliError> {
    let d = &cfg.data;
    if let Some(dir) = dir {
        let seqs = load_sequence_dir(dir)?;
        if seqs.is_empty() {
            return Err(CliError::Core(Error::Format { context: dir.display().to_string(), offset: 0, detail: "no sequences".into() }));
        }
        return Ok(Dataset::new(d.smmnist.context_len, seqs)?);
    }
    let owned;
    let digits = match digits {
        Some(x) => x,
        None => {
            owned = load_digits(cfg)?;
            &owned
        }
    };
    Ok(Dataset::generate(&d.smmnist, digits, &test_seeds()[..d.test_sequences])?)
}

pub fn train_set(cfg: &RunConfig, digits: &DigitSet) -> Result<Dataset, CliError> {
    let seeds: Vec<u64> = (0..cfg.data.train_sequences as u64).map(|i| train_seed(cfg.seed, i)).collect();
    if seeds.is_empty() {
        return Err(config_err("data.train_sequences", "must be at least 1"));
    }
    Ok(Dataset::generate(&cfg.data.smmnist, digits, &seeds)?)
}

/// Final per-sequence negative ELBOs of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub params: usize,
    pub train_elbo: Option<f64>,
    pub test_elbo: f64,
}

/// Train one configuration on prepared data; writes into `cfg.out`.
pub fn train_run(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<RunSummary, CliError> {
    cfg.write_snapshot(&cfg.out)?;
    let model_cfg = cfg.model_config();
    let mut state = TrainState::new(&model_cfg, &cfg.train)?;
    let params = state.store.num_scalars();
    log::info!("training {params} parameters on {} sequences into {}", train.len(), cfg.out.display());
    let mut sink = CsvSink::new(&cfg.out, model_cfg.levels.len())?;
    let out = run_training(&mut state, &TrainData { train, test: Some(test) }, &mut sink)?;
    let last = out.epochs.last();
    let test_elbo = match last.and_then(|r| r.test_elbo) {
        Some(v) => v,
        None => evaluate_elbo(&state.model, &state.store, test, cfg.train.batch_size, eval_seed(cfg))?,
    };
    Ok(RunSummary { params, train_elbo: last.and_then(|r| r.train_elbo), test_elbo })
}

fn eval_seed(cfg: &RunConfig) -> u64 {
    hvrnn::rng::derive_seed(cfg.seed, 1 << 32)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let digits = load_digits(cfg)?;
    let train = train_set(cfg, &digits)?;
    let test = test_set(cfg, Some(&digits), None)?;
    let s = train_run(cfg, &train, &test)?;
    println!("test ELBO {:.4}", s.test_elbo);
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Model, ParamStore<f32>), CliError> {
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("checkpoint"));
    let ck = load_checkpoint(&dir)?;
    let (model, mut store) = Model::new::<f32>(&ck.model, 0)?;
    ck.restore_params(&mut store)?;
    if ck.model.frame_size != cfg.data.smmnist.canvas {
        return Err(config_err("data.smmnist.canvas", format!("checkpoint model expects {0}x{0} frames", ck.model.frame_size)));
    }
    Ok((model, store))
}

fn frame_image(t: &Tensor<f32>, offset: usize, h: usize, w: usize) -> Result<Image, CliError> {
    Ok(Image::from_unit(w, h, &t.data()[offset..offset + h * w])?)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

/// `<out>/generate/sample_NN/frame_TTT.pgm` plus `sample_NN_strip.pgm`
/// (context frames followed by predictions).
pub fn generate(cfg: &RunConfig, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<(), CliError> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let test = test_set(cfg, None, data)?;
    let d = model.config.context_len;
    let g = &cfg.generate;
    let seq = test.sequences.get(g.sequence).ok_or_else(|| config_err("generate.sequence", format!("only {} sequences", test.len())))?;
    if seq.shape()[0] < d {
        return Err(config_err("data.smmnist.context_len", format!("sequences have {} frames, the model needs {d} context frames", seq.shape()[0])));
    }
    let horizon = if g.horizon == 0 { cfg.data.smmnist.horizon } else { g.horizon };
    let (_, c, h, w) = seq.dims4()?;
    let context = seq.narrow(0, 0, d)?.reshape(&[1, d, c, h, w])?;
    let samples = model.generate(&store, &context, horizon, g.n_samples, cfg.seed, false)?;
    let dir = cfg.out.join("generate");
    cfg.write_snapshot(&dir)?;
    let frame = h * w;
    for n in 0..g.n_samples {
        let sub = dir.join(format!("sample_{n:02}"));
        create_dir(&sub)?;
        let mut strip: Vec<Image> = (0..d).map(|t| frame_image(&context, t * frame, h, w)).collect::<Result<_, _>>()?;
        for t in 0..horizon {
            let img = frame_image(&samples, (n * horizon + t) * frame, h, w)?;
            write_pgm(&sub.join(format!("frame_{t:03}.pgm")), &img)?;
            strip.push(img);
        }
        write_pgm(&dir.join(format!("sample_{n:02}_strip.pgm")), &Image::hstack(&strip)?)?;
    }
    println!("wrote {} samples of {horizon} frames to {}", g.n_samples, dir.display());
    Ok(())
}

/// Best-of-N metrics and KL activity into `<out>/eval`.
pub fn evaluate(cfg: &RunConfig, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<(), CliError> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let test = test_set(cfg, None, data)?;
    if test.context_len != model.config.context_len {
        return Err(config_err("data.smmnist.context_len", format!("the model was trained with {} context frames", model.config.context_len)));
    }
    let dir = cfg.out.join("eval");
    cfg.write_snapshot(&dir)?;
    let report = best_of_n(&ModelPredictor { model: &model, store: &store }, &test, &cfg.eval)?;
    write_metrics_csv(&report, &dir.join("metrics.csv"), &dir.join("summary.csv"))?;
    write_summary(&report, &dir.join("summary.txt"))?;
    let kl = kl_activity(&model, &store, &test, cfg.train.batch_size, eval_seed(cfg))?;
    kl.write_csv(&dir.join("kl_activity.csv"))?;
    for m in &report.metrics {
        println!("{}: {:.6} ± {:.6}", m.metric.name().to_uppercase(), m.aggregate.mean, m.aggregate.std);
    }
    println!("active channels per level: {:?}", kl.active_per_level);
    Ok(())
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

/// Expand the grid: presets x warmup x dense x decoder ConvLSTM counts.
pub fn ablation_variants(base: &RunConfig) -> Result<Vec<Variant>, CliError> {
    let a = &base.ablate;
    let stages: Vec<Option<usize>> = if a.decoder_recurrent_stages.is_empty() { vec![None] } else { a.decoder_recurrent_stages.iter().copied().map(Some).collect() };
    let on = |b: bool| if b { "on" } else { "off" };
    let mut out = Vec::new();
    for p in &a.presets {
        for &warm in &a.warmup {
            for &dense in &a.dense {
                for &st in &stages {
                    let mut name = format!("preset={p},warmup={},dense={}", on(warm), on(dense));
                    let mut cfg = base.clone();
                    cfg.model.preset = Some(p.clone());
                    cfg.model.levels = preset(p)?;
                    cfg.model.dense = dense;
                    cfg.train.beta_mode = if warm { BetaMode::Warmup } else { BetaMode::Naive };
                    if let Some(k) = st {
                        write!(name, ",recurrent={k}").expect("string write");
                        cfg.model.decoder_recurrent_stages = k;
                    }
                    cfg.out = base.out.join("ablate").join(name.replace([',', '='], "_"));
                    cfg.validate()?;
                    out.push(Variant { name, config: cfg });
                }
            }
        }
    }
    Ok(out)
}

/// Train every variant sequentially; writes `<out>/ablate/comparison.csv`.
pub fn ablate(base: &RunConfig) -> Result<Vec<(String, RunSummary)>, CliError> {
    let variants = ablation_variants(base)?;
    let digits = load_digits(base)?;
    let train = train_set(base, &digits)?;
    let test = test_set(base, Some(&digits), None)?;
    let dir = base.out.join("ablate");
    base.write_snapshot(&dir)?;
    let mut rows = Vec::new();
    let mut csv = String::from("variant,params,train_elbo,test_elbo\n");
    for v in variants {
        log::info!("ablation cell {}", v.name);
        let s = train_run(&v.config, &train, &test)?;
        let tr = s.train_elbo.map(|x| x.to_string()).unwrap_or_default();
        writeln!(csv, "\"{}\",{},{tr},{}", v.name, s.params, s.test_elbo).expect("string write");
        rows.push((v.name, s));
    }
    let path = dir.join("comparison.csv");
    std::fs::write(&path, csv).map_err(|e| io(&path, e))?;
    println!("wrote {} variants to {}", rows.len(), path.display());
    Ok(rows)
}

/// `<out>/test_set/seq_NNNNN/frame_NNN.pgm` for the fixed test seeds.
pub fn make_data(cfg: &RunConfig) -> Result<(), CliError> {
    let data = test_set(cfg, None, None)?;
    let dir: PathBuf = cfg.out.join("test_set");
    cfg.write_snapshot(&dir)?;
    save_sequence_dir(&dir, &data.sequences)?;
    println!("wrote {} sequences to {}", data.len(), dir.display());
    Ok(())
}
