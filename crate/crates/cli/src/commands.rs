use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, ensure, Context as _, Result};

use ctxcomplete_core::checkpoint::{InstanceCheckpoint, LmCheckpoint};
use ctxcomplete_core::data::{
    gen_synthetic as generate, instance_examples, lm_examples, DatasetDir, LoadConfig, SyntheticConfig,
    UnknownClassPolicy,
};
use ctxcomplete_core::factorcell::{self, ModelConfig};
use ctxcomplete_core::instance::{self, InstanceConfig, InstanceTrainConfig, InstanceTrainer};
use ctxcomplete_core::metrics::{run_eval, EvalConfig};
use ctxcomplete_core::tensor::seeded_rng;
use ctxcomplete_core::train::{ContextMode, LmTrainer, LossCurve, TrainConfig};
use ctxcomplete_core::vocab::Vocab;
use ctxcomplete_service::{
    http, rank_instances, CompleteRequest, CompleteResponse, Engine, InstancesRequest, ModelSlot, NOISE_ID,
};

use crate::{
    CompleteArgs, ContextArg, EvaluateArgs, GenArgs, GradCheckArgs, InstancesArgs, NumericFailure, PresetArg,
    ServeArgs, SplitArg, TrainArgs,
};

const MAX_LEN: usize = 50;

pub fn gen_synthetic(a: &GenArgs, seed: u64) -> Result<()> {
    ensure!(a.scenes > 0, "--scenes must be at least 1");
    ensure!(a.per_scene > 0, "--per-scene must be at least 1");
    ensure!(
        a.noise_sigma.is_finite() && a.noise_sigma >= 0.0,
        "--noise-sigma must be non-negative"
    );
    let cfg = SyntheticConfig {
        n_scenes: a.scenes,
        queries_per_scene: a.per_scene,
        noise_sigma: a.noise_sigma,
        ..SyntheticConfig::default()
    };
    let ds = generate(&cfg, &mut seeded_rng(seed));
    ds.write_to(&a.out)?;
    println!(
        "wrote {} scenes, {} queries, {} classes to {}",
        ds.scenes.len(),
        ds.queries.len(),
        ds.catalog.len(),
        a.out.display()
    );
    Ok(())
}

fn load_data(dir: &Path, split_seed: u64, skip_unknown: bool, feature_dim: Option<usize>) -> Result<DatasetDir> {
    let cfg = LoadConfig {
        max_len: MAX_LEN,
        feature_dim,
        unknown_class: if skip_unknown {
            UnknownClassPolicy::Skip
        } else {
            UnknownClassPolicy::Fail
        },
    };
    let data = DatasetDir::load(dir, &cfg, split_seed).with_context(|| format!("loading {}", dir.display()))?;
    ensure!(
        !data.splits.train.is_empty(),
        "{}: the training split is empty",
        dir.display()
    );
    log::info!(
        "{}: {} train / {} val / {} test queries, {} classes",
        dir.display(),
        data.splits.train.len(),
        data.splits.val.len(),
        data.splits.test.len(),
        data.catalog.len()
    );
    Ok(data)
}

fn curve_path(a: &TrainArgs) -> PathBuf {
    a.curve.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        p.into()
    })
}

fn write_curve(path: &Path, curve: &LossCurve) -> Result<()> {
    fs::write(path, curve.to_csv()).with_context(|| format!("writing {}", path.display()))
}

/// Advances `trainer` to `total` in chunks of `every` iterations, saving
/// after each chunk and once at the end.
fn train_loop<T>(
    trainer: &mut T,
    mut iteration: u64,
    total: u64,
    every: Option<u64>,
    mut step_to: impl FnMut(&mut T, u64) -> Result<u64>,
    mut save: impl FnMut(&T) -> Result<()>,
) -> Result<()> {
    let every = every.filter(|&n| n > 0).unwrap_or(u64::MAX);
    while iteration < total {
        let next = (iteration / every).saturating_add(1).saturating_mul(every).min(total);
        iteration = step_to(trainer, next)?;
        if iteration < total {
            save(trainer)?;
            log::info!("checkpoint at iteration {iteration}");
        }
    }
    save(trainer)
}

pub fn train_lm(a: &TrainArgs, seed: u64) -> Result<()> {
    let data = load_data(&a.data, a.split_seed, a.skip_unknown_classes, None)?;
    let (mut trainer, vocab) = match &a.resume {
        Some(path) => {
            let ckpt = LmCheckpoint::load(path)?;
            let vocab = ckpt.vocab.clone();
            let n = lm_examples(&data.splits.train, &vocab).len();
            (ckpt.into_trainer(n)?, vocab)
        }
        None => {
            let vocab = Vocab::from_corpus(data.splits.train.iter().map(|r| r.query.as_str()));
            let mut cfg = match a.preset {
                PresetArg::Desk => TrainConfig::desk(seed),
                PresetArg::Full => TrainConfig::full(seed),
            };
            cfg.context_mode = match a.context {
                ContextArg::Image => ContextMode::Image,
                ContextArg::Noise => ContextMode::Noise,
            };
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            let feature_dim = data.splits.train[0].features.len();
            let model = cfg.model_config(vocab.len(), feature_dim);
            let n = data.splits.train.len();
            (LmTrainer::new(model, cfg, n)?, vocab)
        }
    };
    if let Some(it) = a.iterations {
        trainer.config.iterations = it;
    }
    let examples = lm_examples(&data.splits.train, &vocab);
    log::info!(
        "language model: vocab {}, {} parameters, {} iterations",
        vocab.len(),
        ctxcomplete_core::params::ParamSet::num_params(&trainer.params),
        trainer.config.iterations
    );

    let classes = data.catalog.names().to_vec();
    let start = Instant::now();
    let total = a
        .stop_at
        .map_or(trainer.config.iterations, |s| s.min(trainer.config.iterations));
    let from = trainer.iteration;
    train_loop(
        &mut trainer,
        from,
        total,
        a.checkpoint_every,
        |t, next| {
            t.run_until(&examples, next)?;
            Ok(t.iteration)
        },
        |t| {
            LmCheckpoint::from_trainer(t, vocab.clone(), classes.clone(), data.images.clone())
                .save(&a.out)
                .map_err(Into::into)
        },
    )?;
    let curve = curve_path(a);
    write_curve(&curve, &trainer.curve)?;
    println!(
        "trained to iteration {} in {:.1}s: nll {:.4} -> {:.4}; checkpoint {}, curve {}",
        trainer.iteration,
        start.elapsed().as_secs_f64(),
        trainer.curve.first().unwrap_or(f64::NAN),
        trainer.curve.last().unwrap_or(f64::NAN),
        a.out.display(),
        curve.display()
    );
    Ok(())
}

pub fn train_instances(a: &TrainArgs, seed: u64) -> Result<()> {
    if a.context != ContextArg::Image {
        log::warn!("--context only applies to the language model; ignored");
    }
    let data = load_data(&a.data, a.split_seed, a.skip_unknown_classes, None)?;
    let (mut trainer, vocab, catalog) = match &a.resume {
        Some(path) => {
            let ckpt = InstanceCheckpoint::load(path)?;
            let vocab = ckpt.vocab.clone();
            let catalog = ckpt.catalog.clone();
            let n = data.splits.train.len();
            (ckpt.into_trainer(n)?, vocab, catalog)
        }
        None => {
            let vocab = Vocab::from_corpus(data.splits.train.iter().map(|r| r.query.as_str()));
            let (cfg, mut tc) = match a.preset {
                PresetArg::Desk => (
                    InstanceConfig::desk(vocab.len(), data.catalog.len()),
                    InstanceTrainConfig::desk(seed),
                ),
                PresetArg::Full => (
                    InstanceConfig::full(vocab.len(), data.catalog.len()),
                    InstanceTrainConfig::full(seed),
                ),
            };
            if let Some(lr) = a.lr {
                tc.target_lr = lr;
            }
            let n = data.splits.train.len();
            (InstanceTrainer::new(cfg, tc, n)?, vocab, data.catalog.clone())
        }
    };
    if let Some(it) = a.iterations {
        trainer.train_config.iterations = it;
    }
    let examples = instance_examples(&data.splits.train, &vocab, &catalog)?;
    log::info!(
        "instance head: vocab {}, {} classes, {} iterations",
        vocab.len(),
        catalog.len(),
        trainer.train_config.iterations
    );

    let start = Instant::now();
    let total = a.stop_at.map_or(trainer.train_config.iterations, |s| {
        s.min(trainer.train_config.iterations)
    });
    let from = trainer.iteration;
    train_loop(
        &mut trainer,
        from,
        total,
        a.checkpoint_every,
        |t, next| {
            t.run_until(&examples, next)?;
            Ok(t.iteration)
        },
        |t| {
            InstanceCheckpoint::from_trainer(t, vocab.clone(), catalog.clone())
                .save(&a.out)
                .map_err(Into::into)
        },
    )?;
    let curve = curve_path(a);
    write_curve(&curve, &trainer.curve)?;
    println!(
        "trained to iteration {} in {:.1}s: loss {:.4} -> {:.4}; checkpoint {}, curve {}",
        trainer.iteration,
        start.elapsed().as_secs_f64(),
        trainer.curve.first().unwrap_or(f64::NAN),
        trainer.curve.last().unwrap_or(f64::NAN),
        a.out.display(),
        curve.display()
    );
    Ok(())
}

pub fn grad_check(a: &GradCheckArgs, seed: u64) -> Result<()> {
    ensure!(
        a.tolerance.is_finite() && a.tolerance > 0.0,
        "--tolerance must be positive"
    );
    let mut rng = seeded_rng(seed);
    let lm = factorcell::grad_check(&ModelConfig::gradcheck(), &mut rng, a.tolerance)?;
    let head = instance::grad_check(&InstanceConfig::gradcheck(), &mut rng, a.tolerance)?;
    println!("language model\n{lm}\n\ninstance head\n{head}");
    if !(lm.passed() && head.passed()) {
        let mut failing: Vec<&str> = lm.failing_groups();
        failing.extend(head.failing_groups());
        return Err(NumericFailure(format!(
            "gradient check failed for {}; worst relative error {:.3e}",
            failing.join(", "),
            lm.worst().max(head.worst())
        ))
        .into());
    }
    Ok(())
}

fn print_completions(out: &mut impl Write, res: &CompleteResponse, json: bool) -> Result<()> {
    if json {
        writeln!(out, "{}", serde_json::to_string(res)?)?;
    } else {
        for c in &res.completions {
            writeln!(out, "{:>3}  {:>10.4}  {}", c.rank, c.logprob, c.text)?;
        }
    }
    Ok(())
}

pub fn complete(a: &CompleteArgs, seed: u64) -> Result<()> {
    let engine = Engine::load(&a.ckpt, None)?;
    let mut image_id = match (&a.image_id, a.noise) {
        (_, true) => NOISE_ID.to_string(),
        (Some(id), false) => id.clone(),
        (None, false) => bail!("pass --image-id ID or --noise"),
    };
    engine.context(&image_id, Some(seed))?;
    let request = |prefix: &str, image_id: &str| CompleteRequest {
        prefix: prefix.to_string(),
        image_id: image_id.to_string(),
        width: a.width,
        k: a.k,
        seed: Some(seed),
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if !a.interactive {
        let res = engine.complete(&request(&a.prefix, &image_id))?;
        return print_completions(&mut out, &res, a.json);
    }

    eprintln!("enter a prefix per line; `:image ID` or `:noise` switches context, `:quit` exits");
    if !a.prefix.is_empty() {
        print_completions(&mut out, &engine.complete(&request(&a.prefix, &image_id))?, a.json)?;
    }
    let mut line = String::new();
    loop {
        eprint!("[{image_id}]> ");
        line.clear();
        if io::stdin().lock().read_line(&mut line)? == 0 {
            break;
        }
        let input = line.trim_end_matches(['\n', '\r']);
        match input.split_once(' ').unwrap_or((input, "")) {
            (":quit" | ":q", _) => break,
            (":noise", _) => image_id = NOISE_ID.to_string(),
            (":image", id) => match engine.context(id.trim(), None) {
                Ok(_) => image_id = id.trim().to_string(),
                Err(e) => eprintln!("error: {e}"),
            },
            _ => match engine.complete(&request(input, &image_id)) {
                Ok(res) => print_completions(&mut out, &res, a.json)?,
                Err(e) => eprintln!("error: {e}"),
            },
        }
        out.flush()?;
    }
    Ok(())
}

pub fn instances(a: &InstancesArgs) -> Result<()> {
    let model = InstanceCheckpoint::load(&a.ckpt)?.instance_model();
    let res = rank_instances(
        &model,
        &InstancesRequest {
            query: a.query.clone(),
            top: a.top,
        },
    )?;
    if a.json {
        println!("{}", serde_json::to_string(&res)?);
    } else {
        for p in &res.probs {
            let mark = if p.p >= res.threshold_used { "*" } else { "" };
            println!("{:<16} {:.4} {mark}", p.class, p.p);
        }
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs, seed: u64) -> Result<()> {
    let lm = LmCheckpoint::load(&a.ckpt)?.language_model();
    let head = InstanceCheckpoint::load(&a.instances_ckpt)?.instance_model();
    let data = load_data(
        &a.data,
        a.split_seed,
        a.skip_unknown_classes,
        Some(lm.config.feature_dim),
    )?;
    let records = match a.split {
        SplitArg::Val => &data.splits.val,
        SplitArg::Test => &data.splits.test,
    };
    let cfg = EvalConfig {
        noise_seed: seed,
        mrr_limit: a.mrr_limit,
        ..EvalConfig::default()
    };
    let start = Instant::now();
    let report = run_eval(&lm, &head, records, &cfg)?;
    log::info!(
        "evaluated {} queries in {:.1}s",
        records.len(),
        start.elapsed().as_secs_f64()
    );
    println!("{report}");
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&a.out, json + "\n").with_context(|| format!("writing {}", a.out.display()))?;
    println!("report written to {}", a.out.display());
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let engine = Engine::load(&a.ckpt, a.instances_ckpt.as_deref())?;
    log::info!(
        "model {}: {} demo images, instance head {}",
        engine.model_version(),
        engine.images().len(),
        if engine.instance_model().is_some() {
            "loaded"
        } else {
            "absent"
        }
    );
    let cors = http::cors(a.cors_origin.as_deref()).context("--cors-origin")?;
    let app = http::router_with_cors(Arc::new(ModelSlot::new(engine)), cors);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        println!("listening on http://{}", listener.local_addr()?);
        io::stdout().flush()?;
        http::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
