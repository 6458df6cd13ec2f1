use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use prompt_condense::backbone::prefit::{prefit, PrefitConfig};
use prompt_condense::backbone::FrozenModel;
use prompt_condense::condenser::Fusion;
use prompt_condense::evaluation::{bench_csv, bench_k_scaling, run_eval, EvalConfig, EvalReport, Mode, Predictor, Variant};
use prompt_condense::par::Exec;
use prompt_condense::profile::Profile;
use prompt_condense::retrieval::Backend;
use prompt_condense::taskgen::{generate, load_dataset, save_dataset, Dataset, GenConfig, Task};
use prompt_condense::training::{backbone_checkpoint, fit_with, write_atomic, Checkpoint, TrainConfig};

use crate::config::{config_err, parse_k_list, RunFile};
use crate::{BenchArgs, Common, EvalArgs, GenArgs, InspectArgs, TrainArgs, TrainOpts};

const EXEC: Exec = Exec::Parallel;

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn load_data(file: &RunFile, flag: Option<PathBuf>) -> Result<(PathBuf, Dataset)> {
    let dir: PathBuf = file.require(flag, "data")?;
    let ds = load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok((dir, ds))
}

fn load_ckpt(file: &RunFile, flag: Option<PathBuf>) -> Result<(PathBuf, Checkpoint)> {
    let path: PathBuf = file.require(flag, "ckpt")?;
    let ck = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((path, ck))
}

/// Training settings: the base config, then the run file and flags on top,
/// then the variant.
fn resolve_train(file: &RunFile, common: &Common, opts: &TrainOpts, base: Option<TrainConfig>) -> Result<(TrainConfig, Variant)> {
    let base = match base {
        Some(b) => b,
        None => TrainConfig::for_profile(file.get(common.profile.clone(), "profile", "desk".to_string())?.parse()?),
    };
    let profile: Profile = file.get(common.profile.clone(), "profile", base.profile.to_string())?.parse()?;
    let cfg = TrainConfig {
        k: file.get(opts.k, "k", base.k)?,
        lambda: file.get(opts.lambda, "lambda", base.lambda)?,
        lr0: file.get(opts.lr, "lr", base.lr0)?,
        epochs: file.get(opts.epochs, "epochs", base.epochs)?,
        batch: file.get(opts.batch, "batch", base.batch)?,
        seed: file.get(common.seed, "seed", base.seed)?,
        task: file.get(common.task.clone(), "task", base.task.to_string())?.parse()?,
        profile,
        retrieval: file.get(opts.retrieval.clone(), "retrieval", base.retrieval.to_string())?.parse()?,
        ..base
    };
    let variant: Variant = file.get(opts.variant.clone(), "variant", "condense".to_string())?.parse()?;
    Ok((cfg, variant))
}

fn check_dims(ds: &Dataset, frozen: &FrozenModel) -> Result<()> {
    if ds.side() != Some(frozen.dims.side) {
        return Err(config_err(format!(
            "dataset side {:?} does not match the model side {}",
            ds.side(),
            frozen.dims.side
        )));
    }
    Ok(())
}

pub fn gen_data(a: GenArgs) -> Result<()> {
    let file = RunFile::load(a.common.config.as_deref())?;
    let task: Task = file.get(a.common.task, "task", "seg".to_string())?.parse()?;
    let profile: Profile = file.get(a.common.profile, "profile", "desk".to_string())?.parse()?;
    let seed = file.get(a.common.seed, "seed", 0u64)?;
    let queries = file.get(a.queries, "queries", 512usize)?;
    let prompts = file.get(a.prompts, "prompts", 256usize)?;
    let out: PathBuf = file.require(a.out, "out")?;
    let cfg = GenConfig::new(seed, queries, prompts, profile.dims().side);
    let ds = generate(task, &cfg, EXEC)?;
    save_dataset(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
    eprintln!(
        "wrote {} train / {} test queries and {} prompts to {}",
        ds.train_queries.len(),
        ds.test_queries.len(),
        ds.prompt_db.len(),
        out.display()
    );
    Ok(())
}

fn metrics_path(out: &Path, flag: Option<PathBuf>, file: &RunFile) -> Result<PathBuf> {
    let default = out.parent().unwrap_or(Path::new("")).join("metrics.jsonl");
    file.get(flag, "metrics", default)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let file = RunFile::load(a.common.config.as_deref())?;
    let (base, variant) = resolve_train(&file, &a.common, &a.opts, None)?;
    let cfg = variant.training_config(&base)?;
    let out: PathBuf = file.require(a.out, "out")?;
    let (data_dir, ds) = load_data(&file, a.data)?;
    let backbone: Option<PathBuf> = file.pick(a.backbone, "backbone")?;
    let prefit_epochs = file.get(a.prefit_epochs, "prefit_epochs", PrefitConfig::default().epochs)?;
    let dims = cfg.profile.dims();

    let mut run = json!({
        "command": "train",
        "variant": variant.as_str(),
        "train": cfg,
        "data": path_str(&data_dir),
        "out": path_str(&out),
    });

    let frozen = match &backbone {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading backbone {}", p.display()))?;
            if *ck.dims() != dims {
                return Err(config_err(format!("backbone {} was built for other model dims", p.display())));
            }
            run["backbone"] = json!(path_str(p));
            ck.frozen
        }
        None => {
            let pcfg = PrefitConfig {
                seed: cfg.seed,
                epochs: prefit_epochs,
                ..PrefitConfig::default()
            };
            eprintln!("pre-fitting the backbone for {} epochs", pcfg.epochs);
            let (frozen, report) = prefit(dims, &ds, &pcfg, EXEC)?;
            for (i, l) in report.epoch_losses.iter().enumerate() {
                eprintln!("prefit epoch {:>3}  ce {l:.4}", i + 1);
            }
            run["prefit_epochs"] = json!(prefit_epochs);
            frozen
        }
    };
    check_dims(&ds, &frozen)?;

    if a.prefit_only {
        run["prefit_only"] = json!(true);
        backbone_checkpoint(&frozen, cfg.seed, run).save(&out)?;
        eprintln!("wrote backbone checkpoint {}", out.display());
        return Ok(());
    }

    let metrics_out = metrics_path(&out, a.metrics, &file)?;
    run["metrics"] = json!(path_str(&metrics_out));
    let mut fitted = fit_with(&cfg, &ds, &frozen, EXEC, |m| {
        eprintln!(
            "epoch {:>3}  l_tp {:.4}  l_pa {:.4}  total {:.4}  lr {:.5}",
            m.epoch, m.loss_tp, m.loss_pa, m.loss_total, m.lr
        );
    })?;
    let mut lines = String::new();
    for m in &fitted.metrics {
        lines.push_str(&serde_json::to_string(m)?);
        lines.push('\n');
    }
    lines.push_str(&serde_json::to_string(&json!({ "config": run }))?);
    lines.push('\n');
    write_atomic(&metrics_out, lines.as_bytes())?;
    fitted.checkpoint.echo.run = run;
    fitted.checkpoint.save(&out)?;
    eprintln!("wrote {} and {}", out.display(), metrics_out.display());
    Ok(())
}

fn eval_config(file: &RunFile, common: &Common, opts: &TrainOpts, ck: &Checkpoint, mode: Mode) -> Result<EvalConfig> {
    let base = EvalConfig::from_checkpoint(ck, ck.echo.train.map(|t| t.k).unwrap_or(4), mode);
    let task: Task = file.get(common.task.clone(), "task", base.task.to_string())?.parse()?;
    let retrieval: Backend = file.get(opts.retrieval.clone(), "retrieval", base.retrieval.to_string())?.parse()?;
    Ok(EvalConfig {
        k: file.get(opts.k, "k", base.k)?,
        task,
        retrieval,
        seed: file.get(common.seed, "seed", base.seed)?,
        ..base
    })
}

fn finish_report(report: &EvalReport, path: Option<PathBuf>, run: &Value) -> Result<()> {
    let agg = &report.aggregate;
    println!(
        "{} {:?} over {} queries: {:.4}  ({:.2} ms/query)",
        report.config.mode, agg.metric, agg.n, agg.mean, agg.ms_per_query
    );
    if let Some(p) = path {
        report.write_jsonl(&p, run)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let file = RunFile::load(a.common.config.as_deref())?;
    let variant: Variant = file.get(a.opts.variant.clone(), "variant", "condense".to_string())?.parse()?;
    if variant.needs_training() && variant != Variant::FullCa {
        return Err(config_err(format!(
            "`{variant}` changes training; train with `--variant {variant}` and evaluate with `condense`, or use `ablate`"
        )));
    }
    let (ckpt_path, ck) = load_ckpt(&file, a.ckpt)?;
    let (data_dir, ds) = load_data(&file, a.data)?;
    check_dims(&ds, &ck.frozen)?;
    let cfg = eval_config(&file, &a.common, &a.opts, &ck, variant.mode())?;
    ds.check_coverage(cfg.k)?;
    let report = run_eval(&ds, &ck, &cfg, EXEC)?;
    let report_path: Option<PathBuf> = file.pick(a.report, "report")?;
    let run = json!({
        "command": "eval",
        "variant": variant.as_str(),
        "ckpt": path_str(&ckpt_path),
        "data": path_str(&data_dir),
        "checkpoint_config": ck.echo,
    });
    finish_report(&report, report_path, &run)
}

pub fn ablate(a: EvalArgs) -> Result<()> {
    let file = RunFile::load(a.common.config.as_deref())?;
    let (ckpt_path, ck) = load_ckpt(&file, a.ckpt)?;
    let (data_dir, ds) = load_data(&file, a.data)?;
    check_dims(&ds, &ck.frozen)?;
    let (base, variant) = resolve_train(&file, &a.common, &a.opts, ck.echo.train)?;
    let mut run = json!({
        "command": "ablate",
        "variant": variant.as_str(),
        "ckpt": path_str(&ckpt_path),
        "data": path_str(&data_dir),
    });
    let model = if variant.needs_training() {
        let cfg = variant.training_config(&base)?;
        eprintln!("retraining the Condenser for `{variant}`");
        run["train"] = json!(cfg);
        let fitted = fit_with(&cfg, &ds, &ck.frozen, EXEC, |m| {
            eprintln!("epoch {:>3}  l_tp {:.4}  l_pa {:.4}", m.epoch, m.loss_tp, m.loss_pa);
        })?;
        let mut ckpt = fitted.checkpoint;
        ckpt.echo.run = run.clone();
        if let Some(out) = file.pick::<PathBuf>(a.out, "out")? {
            ckpt.save(&out)?;
            eprintln!("wrote {}", out.display());
        }
        ckpt
    } else {
        ck
    };
    let mut cfg = eval_config(&file, &a.common, &a.opts, &model, variant.mode())?;
    cfg.k = base.k;
    ds.check_coverage(cfg.k)?;
    let report = run_eval(&ds, &model, &cfg, EXEC)?;
    let report_path: Option<PathBuf> = file.pick(a.report, "report")?;
    finish_report(&report, report_path, &run)
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let file = RunFile::load(a.common.config.as_deref())?;
    let (ckpt_path, ck) = load_ckpt(&file, a.ckpt)?;
    let (data_dir, ds) = load_data(&file, a.data)?;
    check_dims(&ds, &ck.frozen)?;
    let ks = parse_k_list(&file.get(a.k_list, "k_list", "1,2,4,8,16,32".to_string())?)?;
    let queries = file.get(a.queries, "queries", 20usize)?;
    let rows = bench_k_scaling(&ds, &ck, &ks, queries)?;
    let run = json!({
        "command": "bench",
        "ckpt": path_str(&ckpt_path),
        "data": path_str(&data_dir),
        "k_list": ks,
        "queries": queries,
    });
    let text = format!("{}# config: {}\n", bench_csv(&rows), serde_json::to_string(&run)?);
    match file.pick::<PathBuf>(a.out, "out")? {
        Some(p) => {
            write_atomic(&p, text.as_bytes())?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn inspect_attention(a: InspectArgs) -> Result<()> {
    let file = RunFile::load(a.common.config.as_deref())?;
    let (_, ck) = load_ckpt(&file, a.ckpt)?;
    let (_, ds) = load_data(&file, a.data)?;
    check_dims(&ds, &ck.frozen)?;
    let train = ck.echo.train;
    let k = file.get(a.k, "k", train.map(|t| t.k).unwrap_or(4))?;
    let g = ck.dims().grid();
    if a.h >= g || a.w >= g {
        return Err(config_err(format!("position ({}, {}) is outside the {g}x{g} patch grid", a.h, a.w)));
    }
    let query = ds
        .find_query(&a.query)
        .ok_or_else(|| config_err(format!("no query with id `{}`", a.query)))?;
    let cfg = EvalConfig::from_checkpoint(&ck, k, Mode::Condense);
    let predictor = Predictor::new(&ck, &ds.prompt_db, cfg.retrieval, cfg.seed, EXEC)?;
    let cands = predictor.candidates(&query.image, k, 0)?;
    let idx = predictor.retrieve(&query.image, k, 0)?;
    let mode = match train.map(|t| t.fusion) {
        Some(Fusion::Full) => Mode::FullCa,
        _ => Mode::Condense,
    };
    let (_, maps) = predictor.condensed(&query.image, &idx, mode)?;
    let maps = maps.ok_or_else(|| config_err("this checkpoint's fusion has no attention maps"))?;
    let row = a.h * g + a.w;
    let weights = |t: &prompt_condense::numerics::Tensor<f32>| -> Vec<f32> {
        let cols = t.last_dim();
        let r = &t.data()[row * cols..(row + 1) * cols];
        // Full cross-attention spreads each candidate over every position;
        // columns run position-major, candidate-minor.
        let mut w = vec![0.0f32; k];
        for (j, &v) in r.iter().enumerate() {
            w[j % k] += v;
        }
        w
    };
    let ids: Vec<&str> = cands.ids().collect();
    println!("stream,{}", ids.join(","));
    for (name, t) in [("image", &maps.image), ("label", &maps.label)] {
        let w: Vec<String> = weights(t).iter().map(|v| format!("{v:?}")).collect();
        println!("{name},{}", w.join(","));
    }
    Ok(())
}
