//! Acceptance criteria. Every test writes one `[PASS]`/`[FAIL]` line to
//! stderr (bypassing the harness capture) before asserting.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use hvrnn::data::{
    generate_sequence, simulate, synthetic_digits, test_seeds, train_seed, Dataset, Image, SmmnistConfig,
};
use hvrnn::diffcore::gradcheck::{self, GradCheckOptions};
use hvrnn::diffcore::{Graph, ParamStore, Tensor, Var};
use hvrnn::dists::{self, Gaussian, GaussianParams};
use hvrnn::eval::{best_of_n, kl_activity, ssim, EvalConfig, KlActivityReport, Metric, ModelPredictor};
use hvrnn::hvrnn::{time_major, FixedNoise, GaussianNoise, Level, Model, ModelConfig, NoiseSource, Pyramid, RecordingNoise, SequenceBatch, ZeroNoise};
use hvrnn::nn::{Conv2d, Conv2dSpec, ConvLstmCell, ConvLstmState, ConvTranspose2d, GroupNorm, GroupNormSpec, ResidualBlock};
use hvrnn::rng::SplitMix64;
use hvrnn::train::{load_checkpoint, save_checkpoint, train, BetaMode, MemorySink, TrainData, TrainSchedule, TrainState};
use hvrnn::{Error, Result};
use hvrnn_cli::commands::{load_digits, test_set, train_run, train_set};
use hvrnn_cli::{resolve, run, ConfigSources, RunConfig};
use sha2::{Digest, Sha256};

fn report(criterion: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "[{tag}] {criterion}: {detail}");
    assert!(pass, "{criterion}: {detail}");
}

fn uniform(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = uniform(&mut SplitMix64::new(seed), g.shape(out));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for p in store.iter_mut() {
        let v = uniform(&mut rng, p.value().shape());
        *p.value_mut() = v;
    }
}

fn max_rel(store: &ParamStore<f64>, f: impl FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>) -> f64 {
    gradcheck::grad_check(store, f, &GradCheckOptions::default()).unwrap().max_rel_error
}

fn tiny(levels: &[(usize, usize)], horizon: usize) -> ModelConfig {
    ModelConfig {
        frame_size: 8,
        image_channels: 1,
        width: 1.0 / 32.0,
        levels: levels.iter().map(|&(resolution, channels)| Level { resolution, channels }).collect(),
        context_len: 2,
        horizon,
        decoder_recurrent_stages: 3,
        dense: true,
    }
}

fn jitter(store: &mut ParamStore<f64>, seed: u64, amount: f64) {
    let mut rng = SplitMix64::new(seed);
    for p in store.iter_mut() {
        p.value_mut().data_mut().iter_mut().for_each(|v| *v += rng.uniform_in(-amount, amount));
    }
}

fn posterior_from_prior(store: &mut ParamStore<f64>) {
    let pairs: Vec<_> = store
        .iter()
        .filter_map(|(id, p)| {
            let src = p.name.replacen("posterior.", "prior.", 1);
            (src != p.name).then(|| (id, store.id(&src).unwrap()))
        })
        .collect();
    for (dst, src) in pairs {
        let v = store.get(src).value().clone();
        store.set_value(dst, v).unwrap();
    }
}

fn random_batch(cfg: &ModelConfig, b: usize, seed: u64) -> SequenceBatch<f64> {
    let mut rng = SplitMix64::new(seed);
    let s = cfg.frame_size;
    let c = Tensor::from_fn(&[b, cfg.context_len, 1, s, s], |_| rng.uniform());
    let t = Tensor::from_fn(&[b, cfg.horizon, 1, s, s], |_| rng.uniform());
    SequenceBatch::new(c, t).unwrap()
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let mut store = ParamStore::<f64>::new();
    let mut rng = SplitMix64::new(1);
    let a = store.add("a", uniform(&mut rng, &[2, 3, 4, 4])).unwrap();
    let b = store.add("b", uniform(&mut rng, &[2, 3, 2, 2])).unwrap();
    errs.push((
        "primitive ops",
        max_rel(&store, |g, s| {
            let (x, y) = (g.param(s, a), g.param(s, b));
            let up = g.upsample_nearest(y, 2)?;
            let m = g.mul(x, up)?;
            let e = g.exp(m)?;
            let t = g.tanh(x)?;
            let sg = g.sigmoid(up)?;
            let sq = g.square(t)?;
            let c = g.clamp(x, -0.5, 0.5)?;
            let d = g.sub(e, sq)?;
            let d = g.add(d, sg)?;
            let d = g.add(d, c)?;
            let d = g.scale(d, 0.7)?;
            let d = g.add_scalar(d, 0.1)?;
            let cat = g.concat(&[d, x], 1)?;
            let n = g.narrow(cat, 1, 2, 3)?;
            let p = g.max_pool2d(n)?;
            let r = g.relu(p)?;
            let avg = g.global_avg_pool(r)?;
            let l1 = project(g, avg, 2)?;
            let l2 = g.mean(n)?;
            g.add(l1, l2)
        }),
    ));

    let mut store = ParamStore::<f64>::new();
    let mut rng = SplitMix64::new(18);
    let conv = Conv2d::new(&mut store, &mut rng, "conv", Conv2dSpec::same3x3(2, 3).with_bias()).unwrap();
    let up = ConvTranspose2d::new(&mut store, &mut rng, "up", 3, 2, true).unwrap();
    let gn = GroupNorm::new(&mut store, "gn", GroupNormSpec::for_channels(2, 8)).unwrap();
    let rb = ResidualBlock::new(&mut store, &mut rng, "rb", 2, 4, 8).unwrap();
    let x = store.add("x", uniform(&mut rng, &[2, 2, 4, 4])).unwrap();
    randomize(&mut store, 19);
    errs.push((
        "conv/upconv/groupnorm/residual",
        max_rel(&store, |g, s| {
            let xv = g.param(s, x);
            let y = conv.forward(g, s, xv)?;
            let y = g.max_pool2d(y)?;
            let y = up.forward(g, s, y)?;
            let y = g.relu(y)?;
            let y = gn.forward(g, s, y)?;
            let y = rb.forward(g, s, y)?;
            project(g, y, 20)
        }),
    ));

    let mut store = ParamStore::<f64>::new();
    let mut rng = SplitMix64::new(21);
    let cell = ConvLstmCell::new(&mut store, &mut rng, "lstm", 2, 2, 3).unwrap();
    let x = store.add("x", uniform(&mut rng, &[2, 2, 3, 3])).unwrap();
    let h0 = store.add("h0", uniform(&mut rng, &[2, 2, 3, 3])).unwrap();
    let c0 = store.add("c0", uniform(&mut rng, &[2, 2, 3, 3])).unwrap();
    randomize(&mut store, 22);
    errs.push((
        "convlstm",
        max_rel(&store, |g, s| {
            let state = ConvLstmState { hidden: g.param(s, h0), cell: g.param(s, c0) };
            let xv = g.param(s, x);
            let s1 = cell.step(g, s, xv, state)?;
            let s2 = cell.step(g, s, xv, s1)?;
            let a = project(g, s2.hidden, 23)?;
            let b = project(g, s2.cell, 24)?;
            g.add(a, b)
        }),
    ));

    let mut store = ParamStore::<f64>::new();
    let mut rng = SplitMix64::new(25);
    let shape = [2, 3, 2, 2];
    let ids: Vec<_> = ["mq", "lvq", "mp", "lvp", "target"].iter().map(|n| store.add(*n, uniform(&mut rng, &shape)).unwrap()).collect();
    let noise = Tensor::from_fn(&shape, |_| rng.normal());
    errs.push((
        "dists kernels",
        max_rel(&store, |g, s| {
            let v: Vec<_> = ids.iter().map(|&id| g.param(s, id)).collect();
            let q = Gaussian::new(g, v[0], v[1])?;
            let p = Gaussian::new(g, v[2], v[3])?;
            let n = g.constant(noise.clone());
            let z = dists::reparam_sample(g, &q, n)?;
            let kl = dists::gaussian_kl(g, &q, &p)?;
            let kl = g.sum(kl)?;
            let r = dists::recon_nll(g, z, v[4])?;
            g.add(kl, r)
        }),
    ));

    // Full objective: 8x8 frames, T=2, two levels, f64, fixed noise.
    let cfg = tiny(&[(1, 256), (8, 64)], 2);
    let (model, mut store) = Model::new::<f64>(&cfg, 29).unwrap();
    posterior_from_prior(&mut store);
    jitter(&mut store, 33, 0.02);
    let mut rng = SplitMix64::new(31);
    let base: Vec<f64> = (0..64).map(|_| 0.4 + 0.2 * rng.uniform()).collect();
    let mut seq = Tensor::from_fn(&[1, 4, 1, 8, 8], |i| base[i % 64]);
    seq.data_mut().iter_mut().for_each(|v| *v += rng.uniform_in(-0.02, 0.02));
    let batch = SequenceBatch::new(seq.narrow(1, 0, 2).unwrap(), seq.narrow(1, 2, 2).unwrap()).unwrap();
    errs.push(("elbo (L=2, T=2)", max_rel(&store, |g, s| Ok(model.elbo(g, s, &batch, 0.8, &mut GaussianNoise::new(7))?.loss))));

    let secs = start.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    report(
        "gradient correctness (tol 1e-4, < 300 s)",
        worst <= 1e-4 && secs < 300.0,
        &format!("{}; {secs:.0} s", detail.join(", ")),
    );
}

fn composition_oracle(model: &Model, store: &ParamStore<f64>, b: &SequenceBatch<f64>, beta: f64, noise: &[Tensor<f64>]) -> f64 {
    let cfg = &model.config;
    let (bs, d) = (b.batch_size(), b.context_len());
    let frame = |t: &Tensor<f64>, k: usize| t.narrow(1, k, 1).unwrap().reshape(&[bs, 1, cfg.frame_size, cfg.frame_size]).unwrap();
    let mut g = Graph::new();
    let pyrs: Vec<_> = (0..d)
        .map(|k| {
            let f = g.constant(frame(&b.context, k));
            model.encode_frame(&mut g, store, f).unwrap()
        })
        .collect();
    let ctx = Pyramid {
        maps: pyrs[0]
            .maps
            .iter()
            .enumerate()
            .map(|(i, &(r, _))| (r, g.concat(&pyrs.iter().map(|p| p.maps[i].1).collect::<Vec<_>>(), 0).unwrap()))
            .collect(),
    };
    let mut st = model.init_states(&mut g, store, &ctx, bs).unwrap();
    let mut noise = FixedNoise::new(noise.iter().cloned());
    let mut prev = pyrs[d - 1].clone();
    let mut total = 0.0;
    for t in 0..b.horizon() {
        let x = frame(&b.targets, t);
        let xv = g.constant(x.clone());
        let cur = model.encode_frame(&mut g, store, xv).unwrap();
        let q = model.posterior_step(&mut g, store, &mut st, &cur, &mut noise).unwrap();
        let p = model.prior_given(&mut g, store, &mut st, &prev, &q.samples()).unwrap();
        let pred = model.decode_step(&mut g, store, &mut st, &q, &prev).unwrap();
        let recon: f64 = g.value(pred).data().iter().zip(x.data()).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>() / bs as f64;
        let kl: f64 = q.levels.iter().zip(&p).map(|(ql, pl)| ql.params.params(&g).kl(&pl.params(&g)).unwrap().data().iter().sum::<f64>() / bs as f64).sum();
        total += recon + beta * kl;
        prev = cur;
    }
    total
}

fn single_level_objective(model: &Model, store: &ParamStore<f64>, b: &SequenceBatch<f64>, beta: f64, noise: &mut dyn NoiseSource) -> f64 {
    let (bs, d, s) = (b.batch_size(), b.context_len(), model.config.frame_size);
    let mut g = Graph::new();
    let all = Tensor::concat(&[&time_major(&b.context), &time_major(&b.targets)], 0).unwrap();
    let frames = g.constant(all);
    let pyr = model.encode_frame(&mut g, store, frames).unwrap();
    let ctx = pyr.narrow(&mut g, 0, d * bs).unwrap();
    let mut st = model.init_states(&mut g, store, &ctx, bs).unwrap();
    let mut loss: Option<Var> = None;
    for t in 0..b.horizon() {
        let prev = pyr.narrow(&mut g, (d - 1 + t) * bs, bs).unwrap();
        let cur = pyr.narrow(&mut g, (d + t) * bs, bs).unwrap();
        let q = model.posterior_step(&mut g, store, &mut st, &cur, noise).unwrap();
        let p = model.prior_given(&mut g, store, &mut st, &prev, &q.samples()).unwrap();
        let x_hat = model.decode_step(&mut g, store, &mut st, &q, &prev).unwrap();
        let x = g.constant(b.targets.narrow(1, t, 1).unwrap().reshape(&[bs, 1, s, s]).unwrap());
        let recon = dists::recon_nll(&mut g, x_hat, x).unwrap();
        let kl = dists::gaussian_kl(&mut g, &q.levels[0].params, &p[0]).unwrap();
        let kl = g.sum(kl).unwrap();
        let kl = g.scale(kl, beta / bs as f64).unwrap();
        let term = g.add(recon, kl).unwrap();
        loss = Some(match loss {
            None => term,
            Some(acc) => g.add(acc, term).unwrap(),
        });
    }
    g.value(loss.unwrap()).data()[0]
}

#[test]
fn elbo_derivation() {
    let mut worst = 0.0f64;
    for levels in [&[(1, 64), (8, 64)][..], &[(1, 64), (4, 64), (8, 64)][..]] {
        let cfg = tiny(levels, 3);
        let (model, mut store) = Model::new::<f64>(&cfg, 23).unwrap();
        jitter(&mut store, 24, 0.3);
        let b = random_batch(&cfg, 2, 25);
        let mut rec = RecordingNoise::new(GaussianNoise::new(5));
        let mut g = Graph::new();
        let loss = model.elbo(&mut g, &store, &b, 0.7, &mut rec).unwrap().loss;
        let got = g.value(loss).data()[0];
        let want = composition_oracle(&model, &store, &b, 0.7, &rec.draws);
        worst = worst.max((got - want).abs() / want.abs());
    }
    let cfg = tiny(&[(1, 64)], 2);
    let (model, mut store) = Model::new::<f64>(&cfg, 26).unwrap();
    jitter(&mut store, 27, 0.3);
    let b = random_batch(&cfg, 3, 28);
    let mut g = Graph::new();
    let loss = model.elbo(&mut g, &store, &b, 1.0, &mut GaussianNoise::new(6)).unwrap().loss;
    let got = g.value(loss).data()[0];
    let single = single_level_objective(&model, &store, &b, 1.0, &mut GaussianNoise::new(6));
    report(
        "ELBO derivation (hierarchical within 1e-5 rel, single level exact)",
        worst <= 1e-5 && got == single,
        &format!("max hierarchical rel diff {worst:.2e}; single level {got} vs {single}"),
    );
}

#[test]
fn kl_oracle() {
    let mut rng = SplitMix64::new(7);
    let mut worst = 0.0f64;
    let mut outside = 0;
    for _ in 0..100 {
        let (mq, mp, lvq, lvp) = (rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0));
        let q = GaussianParams::new(Tensor::scalar(mq), Tensor::scalar(lvq)).unwrap();
        let p = GaussianParams::new(Tensor::scalar(mp), Tensor::scalar(lvp)).unwrap();
        let closed = q.kl(&p).unwrap().data()[0];
        let (sq, vq, vp) = ((0.5 * lvq).exp(), lvq.exp(), lvp.exp());
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = mq + sq * rng.normal();
            let d = -0.5 * lvq - 0.5 * (z - mq).powi(2) / vq + 0.5 * lvp + 0.5 * (z - mp).powi(2) / vp;
            s += d;
            s2 += d * d;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean).max(0.0) / (n as f64 - 1.0)).sqrt();
        let z = (mean - closed).abs() / se.max(1e-300);
        worst = worst.max(z);
        outside += usize::from(z > 3.0);
    }
    report("KL oracle (100 pairs, 1e5 draws, 3 SE)", outside == 0, &format!("worst deviation {worst:.2} SE"));
}

#[test]
fn full_scale_absolute_values() {
    let _ = writeln!(
        std::io::stderr().lock(),
        "[N/A] absolute full-scale ELBO/FVD/LPIPS/SSIM values: not reproducible at desk scale; covered by the trend criteria"
    );
}

fn trend_config(seed: u64) -> RunConfig {
    let overrides = vec![
        ("seed".into(), serde_json::json!(seed)),
        ("model.frame_size".into(), serde_json::json!(32)),
        ("model.width".into(), serde_json::json!(0.25)),
        ("data.smmnist.canvas".into(), serde_json::json!(32)),
        ("data.smmnist.num_digits".into(), serde_json::json!(1)),
        ("data.train_sequences".into(), serde_json::json!(2000)),
        ("data.test_sequences".into(), serde_json::json!(256)),
        ("train.epochs".into(), serde_json::json!(30)),
    ];
    resolve(&ConfigSources { file: None, overrides }).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Train `variant(cfg)` for three seeds; returns per-seed outputs of `score`.
fn three_seeds(tag: &str, variant: impl Fn(&mut RunConfig), score: impl Fn(&RunConfig, &Dataset, f64) -> f64) -> Vec<f64> {
    let root = std::env::temp_dir().join("hvrnn-acceptance").join(tag);
    (0..3)
        .map(|seed| {
            let mut cfg = trend_config(seed);
            variant(&mut cfg);
            cfg.out = root.join(format!("seed_{seed}"));
            cfg.validate().unwrap();
            let digits = load_digits(&cfg).unwrap();
            let train = train_set(&cfg, &digits).unwrap();
            let test = test_set(&cfg, Some(&digits), None).unwrap();
            let s = train_run(&cfg, &train, &test).unwrap();
            score(&cfg, &test, s.test_elbo)
        })
        .collect()
}

fn test_elbo(_: &RunConfig, _: &Dataset, elbo: f64) -> f64 {
    elbo
}

#[test]
#[ignore = "six 30-epoch desk-scale runs; about 15 CPU-hours each on one core"]
fn capacity_trend() {
    let single = |k: usize| move |c: &mut RunConfig| {
        c.model.preset = Some("1".into());
        c.model.levels = hvrnn::hvrnn::preset("1").unwrap();
        c.model.decoder_recurrent_stages = k;
    };
    let three = median(three_seeds("capacity_3", single(3), test_elbo));
    let one = median(three_seeds("capacity_1", single(1), test_elbo));
    report("capacity trend (3 < 1 recurrent decoder stages, median test ELBO)", three < one, &format!("3-stage {three:.2}, 1-stage {one:.2}"));
}

#[test]
#[ignore = "six 30-epoch desk-scale runs; about 15 CPU-hours each on one core"]
fn hierarchy_trend() {
    let with = |p: &'static str| move |c: &mut RunConfig| {
        c.model.preset = Some(p.into());
        c.model.levels = hvrnn::hvrnn::preset(p).unwrap();
    };
    let two = median(three_seeds("hierarchy_1-8", with("1-8"), test_elbo));
    let one = median(three_seeds("hierarchy_1", with("1"), test_elbo));
    report("hierarchy trend (1-8 <= 1, median test ELBO)", two <= one, &format!("1-8 {two:.2}, 1 {one:.2}"));
}

fn lower_level_active(cfg: &RunConfig, test: &Dataset, _: f64) -> f64 {
    let ck = load_checkpoint(&cfg.out.join("checkpoint")).unwrap();
    let (model, mut store) = Model::new::<f32>(&ck.model, 0).unwrap();
    ck.restore_params(&mut store).unwrap();
    let r = kl_activity(&model, &store, test, cfg.train.batch_size, 0).unwrap();
    r.active_per_level[1] as f64
}

#[test]
#[ignore = "six 30-epoch desk-scale runs; about 15 CPU-hours each on one core"]
fn warmup_connectivity_trend() {
    let mode = |warm: bool| move |c: &mut RunConfig| {
        c.model.dense = warm;
        c.train.beta_mode = if warm { BetaMode::Warmup } else { BetaMode::Naive };
    };
    let full = median(three_seeds("warmup_on", mode(true), lower_level_active));
    let naive = median(three_seeds("warmup_off", mode(false), lower_level_active));
    report("warmup/connectivity trend (active 8x8 channels, median)", full > naive, &format!("warmup+dense {full}, naive {naive}"));
}

fn small_model(levels: &[(usize, usize)]) -> ModelConfig {
    ModelConfig {
        frame_size: 16,
        image_channels: 1,
        width: 1.0 / 16.0,
        levels: levels.iter().map(|&(resolution, channels)| Level { resolution, channels }).collect(),
        context_len: 2,
        horizon: 3,
        decoder_recurrent_stages: 2,
        dense: true,
    }
}

fn small_data(n: u64, seed: u64) -> Dataset {
    let cfg = SmmnistConfig { canvas: 16, num_digits: 1, digit_size: 10, speed: [1.0, 2.0], context_len: 2, horizon: 3, binarize: false };
    let seeds: Vec<u64> = (0..n).map(|i| train_seed(seed, i)).collect();
    Dataset::generate(&cfg, &synthetic_digits(10, 10, 0), &seeds).unwrap()
}

#[test]
fn overfit_sanity() {
    // Four sequences in one batch of four: every step sees the same batch.
    let data = small_data(4, 21);
    let s = TrainSchedule {
        lr_start: 3e-3,
        lr_end: 3e-3,
        batch_size: 4,
        epochs: 200,
        checkpoint_every: 0,
        eval_train_sequences: 0,
        seed: 2,
        ..Default::default()
    };
    let mut state = TrainState::new(&small_model(&[(1, 64), (4, 64)]), &s).unwrap();
    let out = train(&mut state, &TrainData { train: &data, test: None }, &mut MemorySink::default()).unwrap();
    let (first, last) = (out.steps[0].recon, out.steps.last().unwrap().recon);
    let cut = 1.0 - last / first;
    report(
        "overfit sanity (200 steps, recon reduced >= 90%)",
        out.steps.len() == 200 && cut >= 0.9,
        &format!("{} steps, recon {first:.3} -> {last:.3} ({:.1}% lower)", out.steps.len(), 100.0 * cut),
    );
}

const TINY_RUN: &str = r#"{
  "model": {"preset": "1-8", "frame_size": 16, "width": 0.0625, "decoder_recurrent_stages": 2},
  "data": {"smmnist": {"canvas": 16, "digit_size": 8, "speed": [1.0, 2.0], "context_len": 2, "horizon": 3},
           "train_sequences": 8, "test_sequences": 3, "synthetic_count": 20, "digit_source": "synthetic"},
  "train": {"epochs": 1, "batch_size": 4, "eval_train_sequences": 4},
  "eval": {"n_samples": 3}
}"#;

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn protocol_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, TINY_RUN).unwrap();
    let out = dir.path().join("out");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let hv = |args: &[&str]| run(["hvrnn"].iter().chain(args).copied());
    assert_eq!(hv(&["train", "--config", c, "--out", o]), 0);
    let mut same = true;
    let mut files = 0;
    for cmd in ["generate", "evaluate"] {
        assert_eq!(hv(&[cmd, "--config", c, "--out", o, "--seed", "3"]), 0);
        let sub = out.join(if cmd == "generate" { "generate" } else { "eval" });
        let first = tree(&sub);
        assert_eq!(hv(&[cmd, "--config", c, "--out", o, "--seed", "3"]), 0);
        let second = tree(&sub);
        files += first.len();
        same &= !first.is_empty() && first == second;
    }
    report("protocol determinism (generate, evaluate rerun byte-identical)", same, &format!("{files} files compared"));
}

#[test]
fn metric_unit_checks() {
    let mut rng = SplitMix64::new(5);
    let mut ssim_ok = true;
    for k in 0..20 {
        let shape = [1, 8 + k, 8 + 2 * k];
        let x = Tensor::<f32>::from_fn(&shape, |_| rng.uniform() as f32);
        ssim_ok &= ssim(&x, &x).unwrap() == 1.0;
    }
    let (model, store) = Model::new::<f32>(&small_model(&[(1, 64), (4, 64)]), 3).unwrap();
    let cfg = SmmnistConfig { canvas: 16, num_digits: 1, digit_size: 10, speed: [1.0, 2.0], context_len: 2, horizon: 3, binarize: false };
    let data = Dataset::generate(&cfg, &synthetic_digits(10, 10, 0), &test_seeds()[..4]).unwrap();
    let p = ModelPredictor { model: &model, store: &store };
    let mut prev: Option<Vec<f64>> = None;
    let mut monotone = true;
    for n in [1, 2, 4, 8] {
        let r = best_of_n(&p, &data, &EvalConfig { n_samples: n, metrics: vec![Metric::Ssim], ..Default::default() }).unwrap();
        let s: Vec<f64> = r.metrics[0].sequences.iter().map(|q| q.score).collect();
        if let Some(old) = &prev {
            monotone &= s.iter().zip(old).all(|(a, b)| a >= b);
        }
        prev = Some(s);
    }
    let kl = kl_activity(&model, &store, &data, 2, 0).unwrap();
    let synthetic = KlActivityReport::from_means(&[vec![0.005, 0.02, 0.2], vec![0.15, 0.16]]);
    let implication = kl.channels.iter().chain(&synthetic.channels).all(|c| !c.maximal || c.active);
    report(
        "metric unit checks (ssim(x,x)=1, best-of-N monotone, maximal => active)",
        ssim_ok && monotone && implication,
        &format!("ssim exact {ssim_ok}, monotone over N=1,2,4,8 {monotone}, {} channels checked", kl.channels.len() + synthetic.channels.len()),
    );
}

fn forward_bits(model: &Model, store: &ParamStore<f32>, b: &SequenceBatch<f32>) -> Vec<u32> {
    let mut g = Graph::new();
    let out = model.elbo(&mut g, store, b, 1.0, &mut ZeroNoise).unwrap();
    let mut v = vec![g.value(out.loss).data()[0].to_bits()];
    v.extend(out.predictions.iter().flat_map(|&p| g.value(p).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()));
    v
}

#[test]
fn checkpoint_round_trip() {
    let mut state = TrainState::new(&small_model(&[(1, 64), (4, 64)]), &TrainSchedule { batch_size: 2, epochs: 1, eval_train_sequences: 0, ..Default::default() }).unwrap();
    let data = small_data(4, 1);
    train(&mut state, &TrainData { train: &data, test: None }, &mut MemorySink::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&state.checkpoint(), dir.path()).unwrap();
    let restored = TrainState::from_checkpoint(&load_checkpoint(dir.path()).unwrap()).unwrap();
    let batch = data.batch(&[0, 1]).unwrap();
    let identical = forward_bits(&state.model, &state.store, &batch) == forward_bits(&restored.model, &restored.store, &batch);
    let mut other = TrainState::new(&small_model(&[(1, 64)]), &TrainSchedule::default()).unwrap();
    let named = match load_checkpoint(dir.path()).unwrap().restore_params(&mut other.store) {
        Err(Error::Checkpoint(msg)) => msg.contains("prior.level1"),
        _ => false,
    };
    report("checkpoint round-trip (bit-identical forward, named cross-preset error)", identical && named, &format!("bit-identical {identical}, named error {named}"));
}

#[test]
fn data_generator() {
    let c = SmmnistConfig::default();
    let digits = synthetic_digits(50, 28, 3);
    let max = c.max_pos();
    let (mut frames, mut violations, mut seed) = (0usize, 0usize, 0u64);
    while frames < 10_000 {
        let tr = simulate(&c, digits.len(), seed).unwrap();
        for k in 0..c.num_digits {
            let mut anchor = 0;
            for t in 0..c.seq_len() {
                let s = tr.states[t][k];
                violations += usize::from(!((0.0..=max).contains(&s.x) && (0.0..=max).contains(&s.y)));
                if tr.bounced[t][k] {
                    anchor = t;
                    continue;
                }
                let a = tr.states[anchor][k];
                let dt = (t - anchor) as f64;
                let linear = (s.x - (a.x + dt * a.vx)).abs() < 1e-5 && (s.y - (a.y + dt * a.vy)).abs() < 1e-5 && (s.vx, s.vy) == (a.vx, a.vy);
                violations += usize::from(!linear);
            }
        }
        let seq = generate_sequence(&c, &digits, seed).unwrap();
        violations += seq.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        frames += c.seq_len();
        seed += 1;
    }
    let digits = synthetic_digits(10, 28, 0);
    let mut h = Sha256::new();
    for seed in 0..4 {
        let seq = generate_sequence(&SmmnistConfig::default(), &digits, seed).unwrap();
        h.update(&Image::from_unit(64, 64 * 15, seq.data()).unwrap().pixels);
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    // Pinned value, reproduced by an independent reimplementation of the generator.
    let golden = hex == "eafc0dcaa4f78f671d02b0ecfeb52ed116210432f0bd7b5111a1c53aa26fed96";
    report(
        "data generator (10,000 frames in bounds and linear, golden hash)",
        violations == 0 && golden,
        &format!("{frames} frames, {violations} violations, hash {}", &hex[..16]),
    );
}
