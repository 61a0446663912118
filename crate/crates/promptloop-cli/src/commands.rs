use std::path::{Path, PathBuf};

use promptloop::config::Config;
use promptloop::dataio::dataset::{load_dataset, save_dataset, split_dir};
use promptloop::dataio::{write_p5, write_p6};
use promptloop::error::{Error, Result};
use promptloop::generator::{
    train_denoiser, DenoiserHyper, DenoiserParams, NoiseSchedule, PromptEmbedding, SamplerConfig,
    GEN_SAMPLE_STEPS, T_STEPS,
};
use promptloop::guidance::{
    embedding_pairs, retrieval_accuracy, train_joint_embedder, EmbedHyper, JointEmbedder,
};
use promptloop::manifest::{RunManifest, StageBuilder};
use promptloop::pipeline::{
    cross_model_transfer, data_efficiency_sweep, metric_name, metric_value, subset_stride,
    Method, PipelineCtx, SYNTH_FRACTIONS,
};
use promptloop::promptopt::{BankEntry, PromptBank, TraceRow};
use promptloop::rng::{mix, str_tag};
use promptloop::taskmodels::{
    concat_mixture, train, ArchId, MixtureItem, Regime, TaskKind, TaskModel, TrainHyper,
};
use promptloop::toyworlds::{
    build_world, generator_pool, vocabulary, ToyDataset, VocabEntry, World, WorldConfig,
    WorldKind, SIDE,
};

use crate::{Cli, Cmd};

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::new(),
    };
    for spec in &cli.sets {
        cfg.apply_override(spec)?;
    }
    let root = cli
        .root
        .clone()
        .or_else(|| std::env::var_os("PROMPTLOOP_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    let run = root.join(cfg.get_or("run.id", "run"));

    match cli.cmd {
        Cmd::BuildWorld => cmd_build_world(&run, &cfg),
        Cmd::Pretrain => cmd_pretrain(&run, &cfg),
        Cmd::Optimize => cmd_optimize(&run, &cfg),
        Cmd::Generate => cmd_generate(&run, &cfg),
        Cmd::Train => cmd_train(&run, &cfg),
        Cmd::Sweep => cmd_sweep(&run, &cfg),
        Cmd::Transfer => cmd_transfer(&run, &cfg),
        Cmd::Verify => cmd_verify(&run),
        Cmd::Render { data, id, target, out } => cmd_render(&data, &id, &target, &out),
    }
}

// ── Run bookkeeping ──

/// Load the run's manifest, or start one. A run directory is bound to one
/// config: appending stages under a different config would make the recorded
/// `config_text` useless for replay, so that is refused.
fn open_manifest(run: &Path, cfg: &Config) -> Result<RunManifest> {
    std::fs::create_dir_all(run).map_err(|e| Error::io(run, e))?;
    if run.join("manifest.json").is_file() {
        let m = RunManifest::load(run)?;
        if m.config_hash != cfg.hash_hex() {
            return Err(Error::config(
                "run",
                format!(
                    "config hash {} does not match {} recorded in {}; pick a fresh run.id",
                    cfg.hash_hex(),
                    m.config_hash,
                    run.join("manifest.json").display()
                ),
            ));
        }
        Ok(m)
    } else {
        Ok(RunManifest::new(cfg.get_or("run.id", "run"), cfg))
    }
}

/// Stages are append-only; recording the same stage twice would leave stale
/// hashes behind, so reruns go to a fresh run.id instead.
fn record_stage(
    run: &Path,
    manifest: &mut RunManifest,
    stage: promptloop::manifest::StageRecord,
) -> Result<()> {
    if manifest.stage(&stage.name).is_some() {
        return Err(Error::config(
            "run",
            format!("stage `{}` is already recorded in this run; pick a fresh run.id", stage.name),
        ));
    }
    manifest.push_stage(stage);
    manifest.save(run)?;
    Ok(())
}

fn guard_stage(manifest: &RunManifest, name: &str) -> Result<()> {
    if manifest.stage(name).is_some() {
        return Err(Error::config(
            "run",
            format!("stage `{name}` is already recorded in this run; pick a fresh run.id"),
        ));
    }
    Ok(())
}

// ── Config plumbing ──

fn world_config(cfg: &Config) -> Result<WorldConfig> {
    let name = cfg.get_or("world.kind", "spurbirds");
    let kind = WorldKind::parse(name)
        .ok_or_else(|| Error::config("world.kind", format!("unknown world `{name}`")))?;
    let mut wc = WorldConfig::defaults(kind, cfg.get_u64("world.seed", 7)?);
    wc.train = cfg.get_usize("world.train", wc.train)?;
    wc.val = cfg.get_usize("world.val", wc.val)?;
    wc.test = cfg.get_usize("world.test", wc.test)?;
    wc.correlation = cfg.get_f64("world.correlation", wc.correlation)?;
    Ok(wc)
}

fn parse_u64_list(cfg: &Config, key: &str, default: &[u64]) -> Result<Vec<u64>> {
    let Some(text) = cfg.get(key) else { return Ok(default.to_vec()) };
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(key, format!("bad integer `{}`", s.trim())))
        })
        .collect()
}

fn parse_f64_list(cfg: &Config, key: &str, default: &[f64]) -> Result<Vec<f64>> {
    let Some(text) = cfg.get(key) else { return Ok(default.to_vec()) };
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(key, format!("bad number `{}`", s.trim())))
        })
        .collect()
}

fn parse_methods(cfg: &Config, key: &str, default: &[Method]) -> Result<Vec<Method>> {
    let Some(text) = cfg.get(key) else { return Ok(default.to_vec()) };
    text.split(',')
        .map(|s| {
            let s = s.trim();
            Method::parse(s).ok_or_else(|| Error::config(key, format!("unknown method `{s}`")))
        })
        .collect()
}

fn optional_f64(cfg: &Config, key: &str) -> Result<Option<f64>> {
    match cfg.get(key) {
        None => Ok(None),
        Some(s) => s
            .parse::<f64>()
            .map(Some)
            .map_err(|_| Error::config(key, format!("bad number `{s}`"))),
    }
}

fn optional_usize(cfg: &Config, key: &str) -> Result<Option<usize>> {
    match cfg.get(key) {
        None => Ok(None),
        Some(s) => s
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::config(key, format!("bad integer `{s}`"))),
    }
}

fn parse_regime(cfg: &Config) -> Result<Regime> {
    let name = cfg.get_or("pipeline.regime", "finetune_last");
    Regime::parse(name).ok_or_else(|| Error::config("pipeline.regime", format!("unknown regime `{name}`")))
}

fn parse_arch(cfg: &Config, key: &str, default: &str) -> Result<ArchId> {
    let name = cfg.get_or(key, default);
    ArchId::parse(name).ok_or_else(|| Error::config(key, format!("unknown arch `{name}`")))
}

fn seeds_of(cfg: &Config) -> Result<Vec<u64>> {
    let seeds = parse_u64_list(cfg, "pipeline.seeds", &[1, 2, 3])?;
    if seeds.is_empty() {
        return Err(Error::config("pipeline.seeds", "need at least one seed"));
    }
    Ok(seeds)
}

// ── Artifact paths and loading ──

fn world_root(run: &Path) -> PathBuf {
    run.join("world")
}

fn model_path(run: &Path, name: &str) -> PathBuf {
    run.join("models").join(name)
}

fn task_model_file(arch: ArchId) -> String {
    format!("task-{}.ck", arch.as_str())
}

fn bank_dir(run: &Path, method: Method, seed: u64) -> PathBuf {
    run.join("bank").join(format!("{}-s{seed}", method.as_str()))
}

fn gen_dir(run: &Path, method: Method, seed: u64) -> PathBuf {
    run.join("gen").join(format!("{}-s{seed}", method.as_str()))
}

fn require(path: &Path, what: &str, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::missing(format!("{what}; run `promptloop {produced_by}` first"), path))
    }
}

fn load_world(run: &Path, cfg: &Config) -> Result<World> {
    let wc = world_config(cfg)?;
    let root = world_root(run);
    let mut splits = Vec::new();
    for name in ["train", "val", "test"] {
        let dir = split_dir(&root, wc.kind, name);
        require(&dir.join("index.tsv"), &format!("world split {name}"), "build-world")?;
        splits.push(load_dataset(&dir)?);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(World { cfg: wc, train, val, test })
}

struct Stack {
    world: World,
    sch: NoiseSchedule,
    denoiser: DenoiserParams,
    embedder: JointEmbedder,
    vocab: Vec<VocabEntry>,
    model: TaskModel,
}

fn load_stack(run: &Path, cfg: &Config) -> Result<Stack> {
    let world = load_world(run, cfg)?;
    let arch = parse_arch(cfg, "model.arch", "mlp_small")?;
    let den = model_path(run, "denoiser.ck");
    let emb = model_path(run, "embedder.ck");
    let task = model_path(run, &task_model_file(arch));
    require(&den, "denoiser checkpoint", "pretrain")?;
    require(&emb, "embedder checkpoint", "pretrain")?;
    require(&task, &format!("task model `{}`", arch.as_str()), "pretrain")?;
    Ok(Stack {
        world,
        sch: NoiseSchedule::new(T_STEPS),
        denoiser: DenoiserParams::load(&den)?,
        embedder: JointEmbedder::load(&emb)?,
        vocab: vocabulary(world_config(cfg)?.kind, cfg.get_u64("vocab.seed", 17)?),
        model: TaskModel::load(&task)?,
    })
}

fn make_ctx<'a>(stack: &'a Stack, cfg: &Config) -> Result<PipelineCtx<'a>> {
    let budget = cfg.get_usize("pipeline.budget", 512)?;
    let mut ctx = PipelineCtx::new(
        &stack.world,
        &stack.denoiser,
        &stack.sch,
        &stack.embedder,
        &stack.vocab,
        &stack.model,
        budget,
        cfg.get_u64("optim.seed", 29)?,
    );
    ctx.prompts = cfg.get_usize("pipeline.prompts", ctx.prompts)?;
    ctx.pool_per_group = cfg.get_usize("pipeline.pool", ctx.pool_per_group)?;
    ctx.train_epochs = optional_usize(cfg, "pipeline.train_epochs")?;

    ctx.opt.tokens = cfg.get_usize("optim.tokens", ctx.opt.tokens)?;
    ctx.opt.lr = cfg.get_f64("optim.lr", ctx.opt.lr)?;
    ctx.opt.max_steps = cfg.get_usize("optim.steps", ctx.opt.max_steps)?;
    ctx.opt.warmup_skip = cfg.get_usize("optim.warmup", ctx.opt.warmup_skip)?;
    ctx.opt.batch = cfg.get_usize("optim.batch", ctx.opt.batch)?;
    ctx.opt.window = cfg.get_usize("optim.window", ctx.opt.window)?;
    ctx.opt.early_stop = optional_f64(cfg, "optim.early_stop")?;
    ctx.opt.sampler.steps = cfg.get_usize("optim.sample_steps", ctx.opt.sampler.steps)?;
    ctx.opt.sampler.sdedit_strength =
        cfg.get_f64("optim.strength", ctx.opt.sampler.sdedit_strength)?;
    ctx.opt.sampler.cfg_scale = cfg.get_f64("optim.cfg_scale", ctx.opt.sampler.cfg_scale)?;
    ctx.opt.validate()?;

    ctx.guided_opt.tokens = ctx.opt.tokens;
    ctx.guided_opt.lr = ctx.opt.lr;
    ctx.guided_opt.batch = ctx.opt.batch;
    ctx.guided_opt.window = ctx.opt.window;
    ctx.guided_opt.early_stop = ctx.opt.early_stop;
    ctx.guided_opt.sampler = ctx.opt.sampler.clone();
    let gsteps = cfg.get_usize("optim.guided_steps", ctx.guided_opt.max_steps)?;
    ctx.guided_opt.max_steps = gsteps;
    let warm_default = (gsteps / 5).min(gsteps.saturating_sub(1));
    ctx.guided_opt.warmup_skip = cfg.get_usize("optim.guided_warmup", warm_default)?;
    ctx.guided_opt.validate()?;

    ctx.gen_sampler = SamplerConfig {
        steps: cfg.get_usize("gen.sample_steps", GEN_SAMPLE_STEPS)?,
        ..ctx.opt.sampler.clone()
    };
    Ok(ctx)
}

// ── Commands ──

fn cmd_build_world(run: &Path, cfg: &Config) -> Result<()> {
    let mut manifest = open_manifest(run, cfg)?;
    guard_stage(&manifest, "build-world")?;
    let wc = world_config(cfg)?;
    let world = build_world(&wc)?;
    let root = world_root(run);
    let mut stage = StageBuilder::new("build-world");
    for (name, ds) in [("train", &world.train), ("val", &world.val), ("test", &world.test)] {
        let dir = split_dir(&root, wc.kind, name);
        save_dataset(ds, &dir)?;
        stage.artifact(run, &dir)?;
        stage.metric(format!("examples.{name}"), ds.len() as f64);
        println!("{} {name}: {} examples -> {}", wc.kind.as_str(), ds.len(), dir.display());
    }
    record_stage(run, &mut manifest, stage.finish())
}

fn cmd_pretrain(run: &Path, cfg: &Config) -> Result<()> {
    let mut manifest = open_manifest(run, cfg)?;
    guard_stage(&manifest, "pretrain")?;
    let world = load_world(run, cfg)?;
    let wc = &world.cfg;
    let vocab_seed = cfg.get_u64("vocab.seed", 17)?;
    let sch = NoiseSchedule::new(T_STEPS);
    let mut stage = StageBuilder::new("pretrain");
    let models = run.join("models");
    std::fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;

    let pool = generator_pool(wc, cfg.get_usize("gen.pool", 1024)?);
    let mut hyper = DenoiserHyper::defaults(cfg.get_u64("gen.seed", 11)?);
    hyper.hidden = cfg.get_usize("gen.hidden", hyper.hidden)?;
    hyper.iters = cfg.get_usize("gen.iters", hyper.iters)?;
    hyper.batch = cfg.get_usize("gen.batch", hyper.batch)?;
    hyper.lr = cfg.get_f64("gen.lr", hyper.lr)?;
    hyper.prompt_dropout = cfg.get_f64("gen.dropout", hyper.prompt_dropout)?;
    hyper.vocab_seed = vocab_seed;
    let denoiser = train_denoiser(&pool, &sch, &hyper)?;
    let den_path = model_path(run, "denoiser.ck");
    denoiser.save(&den_path)?;
    stage.artifact(run, &den_path)?;
    println!("denoiser: {} pool examples, {} iters -> {}", pool.len(), hyper.iters, den_path.display());

    let vocab = vocabulary(wc.kind, vocab_seed);
    let epool = generator_pool(wc, cfg.get_usize("embed.pool", 512)?);
    let pairs = embedding_pairs(wc.kind, &epool, &vocab)?;
    let mut ehyper = EmbedHyper::defaults(cfg.get_u64("embed.seed", 13)?);
    ehyper.iters = cfg.get_usize("embed.iters", ehyper.iters)?;
    ehyper.batch = cfg.get_usize("embed.batch", ehyper.batch)?;
    ehyper.lr = cfg.get_f64("embed.lr", ehyper.lr)?;
    let embedder = train_joint_embedder(JointEmbedder::init(ehyper.seed), &pairs, &ehyper)?;
    let retrieval = retrieval_accuracy(&embedder, &pairs)?;
    let emb_path = model_path(run, "embedder.ck");
    embedder.save(&emb_path)?;
    stage.artifact(run, &emb_path)?;
    stage.metric("embedder.retrieval", retrieval);
    println!("embedder: retrieval accuracy {retrieval:.3} on {} pairs", pairs.len());

    let mut archs = vec![parse_arch(cfg, "model.arch", "mlp_small")?];
    if let Some(name) = cfg.get("transfer.other_arch") {
        let other = ArchId::parse(name)
            .ok_or_else(|| Error::config("transfer.other_arch", format!("unknown arch `{name}`")))?;
        if !archs.contains(&other) {
            archs.push(other);
        }
    }
    let task = TaskKind::for_world(wc.kind);
    let model_seed = cfg.get_u64("model.seed", 5)?;
    for arch in archs {
        let init = TaskModel::init(arch, task, mix(model_seed, &[str_tag("pretrain"), str_tag(arch.as_str())]));
        let mut thyper = TrainHyper::defaults(
            Regime::Scratch,
            mix(model_seed, &[str_tag("pretrain-train"), str_tag(arch.as_str())]),
        );
        thyper.epochs = cfg.get_usize("model.epochs", thyper.epochs)?;
        let trained = train(init, &concat_mixture(&[&world.train]), &world.val, &thyper)?;
        let m = metric_value(&trained, &world);
        let path = model_path(run, &task_model_file(arch));
        trained.save(&path)?;
        stage.artifact(run, &path)?;
        stage.metric(format!("{}.{}", metric_name(wc.kind), arch.as_str()), m);
        println!("task model {}: test {} {m:.4} -> {}", arch.as_str(), metric_name(wc.kind), path.display());
    }
    record_stage(run, &mut manifest, stage.finish())
}

fn optimize_method(cfg: &Config) -> Result<Method> {
    let name = cfg.get_or("optim.method", "adversarial");
    let method = Method::parse(name)
        .ok_or_else(|| Error::config("optim.method", format!("unknown method `{name}`")))?;
    if method == Method::NoExtra {
        return Err(Error::config("optim.method", "`no_extra` produces no prompts"));
    }
    Ok(method)
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut text = String::from("step\tobjective\tadversarial\tguidance\ttask_loss\tbest_objective\n");
    for r in trace {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.step, r.objective, r.adversarial, r.guidance, r.task_loss, r.best_objective
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_optimize(run: &Path, cfg: &Config) -> Result<()> {
    let mut manifest = open_manifest(run, cfg)?;
    let method = optimize_method(cfg)?;
    let stage_name = format!("optimize:{}", method.as_str());
    guard_stage(&manifest, &stage_name)?;
    let stack = load_stack(run, cfg)?;
    let ctx = make_ctx(&stack, cfg)?;
    let seeds = seeds_of(cfg)?;
    let config_hash = match method {
        Method::Guided | Method::GuidedAdversarial => ctx.guided_opt.hash(),
        _ => ctx.opt.hash(),
    };
    let feedback = match method {
        Method::Adversarial | Method::GuidedAdversarial => stack.model.arch.as_str().to_string(),
        _ => "none".to_string(),
    };
    let mut stage = StageBuilder::new(&stage_name);
    for &seed in &seeds {
        let banked = promptloop::pipeline::acquire_bank(&ctx, &stack.model, method, seed)?;
        let dir = bank_dir(run, method, seed);
        let mut bank = PromptBank::default();
        for b in &banked {
            bank.push(BankEntry {
                prompt: b.prompt.clone(),
                iteration: 0,
                class: b.class,
                task_loss: b.task_loss,
                guidance_loss: b.guidance_loss,
                config_hash: config_hash.clone(),
                feedback: feedback.clone(),
            })?;
        }
        bank.save(&dir)?;
        for b in &banked {
            if !b.trace.is_empty() {
                write_trace(&dir.join(format!("{}-trace.tsv", b.prompt.id)), &b.trace)?;
            }
            stage.metric(format!("task_loss.s{seed}.{}", b.prompt.id), b.task_loss);
            println!(
                "s{seed} {}: {} steps, task loss {:.4} -> {}",
                b.prompt.id,
                b.trace.len(),
                b.task_loss,
                dir.display()
            );
        }
        stage.artifact(run, &dir)?;
    }
    record_stage(run, &mut manifest, stage.finish())
}

fn cmd_generate(run: &Path, cfg: &Config) -> Result<()> {
    let mut manifest = open_manifest(run, cfg)?;
    let method = optimize_method(cfg)?;
    let stage_name = format!("generate:{}", method.as_str());
    guard_stage(&manifest, &stage_name)?;
    let stack = load_stack(run, cfg)?;
    let ctx = make_ctx(&stack, cfg)?;
    let seeds = seeds_of(cfg)?;
    let mut stage = StageBuilder::new(&stage_name);
    for &seed in &seeds {
        let bdir = bank_dir(run, method, seed);
        require(&bdir.join("bank.tsv"), &format!("prompt bank {}-s{seed}", method.as_str()), "optimize")?;
        let bank = PromptBank::load(&bdir)?;
        let lanes: Vec<(&PromptEmbedding, Option<usize>)> =
            bank.entries.iter().map(|e| (&e.prompt, e.class)).collect();
        let ds = promptloop::pipeline::synthesize_grouped(
            &stack.denoiser,
            &stack.sch,
            &stack.world.train,
            &ctx.gen_sampler,
            &lanes,
            ctx.full_budget,
            mix(seed, &[str_tag("gen"), str_tag(method.as_str())]),
            "synthetic",
        )?;
        let dir = gen_dir(run, method, seed);
        save_dataset(&ds, &dir)?;
        stage.artifact(run, &dir)?;
        stage.metric(format!("examples.s{seed}"), ds.len() as f64);
        println!("s{seed}: {} generated examples -> {}", ds.len(), dir.display());
    }
    record_stage(run, &mut manifest, stage.finish())
}

fn cmd_train(run: &Path, cfg: &Config) -> Result<()> {
    let mut manifest = open_manifest(run, cfg)?;
    let world = load_world(run, cfg)?;
    let arch = parse_arch(cfg, "model.arch", "mlp_small")?;
    let task_path = model_path(run, &task_model_file(arch));
    let regime = parse_regime(cfg)?;
    let synth = match cfg.get("train.data") {
        None => None,
        Some(rel) => {
            let dir = run.join(rel);
            require(&dir.join("index.tsv"), &format!("generated dataset `{rel}`"), "generate")?;
            let ds = load_dataset(&dir)?;
            match optional_usize(cfg, "mixture.count")? {
                Some(count) => Some((rel.to_string(), subset_stride(&ds, count)?)),
                None => Some((rel.to_string(), ds)),
            }
        }
    };
    let label = match &synth {
        Some((rel, _)) => rel.replace('/', "-"),
        None => "original".to_string(),
    };
    let stage_name = format!("train:{label}");
    guard_stage(&manifest, &stage_name)?;

    let mut stage = StageBuilder::new(&stage_name);
    let seeds = seeds_of(cfg)?;
    let model_seed = cfg.get_u64("model.seed", 5)?;
    let tuned_dir = run.join("tuned");
    for &seed in &seeds {
        let base = match regime {
            Regime::Scratch => TaskModel::init(
                arch,
                TaskKind::for_world(world.cfg.kind),
                mix(model_seed, &[str_tag("scratch"), seed]),
            ),
            Regime::FinetuneLast => {
                require(&task_path, &format!("task model `{}`", arch.as_str()), "pretrain")?;
                TaskModel::load(&task_path)?
            }
        };
        let mut hyper = TrainHyper::defaults(regime, mix(seed, &[str_tag("cli-train"), str_tag(&label)]));
        if let Some(epochs) = optional_usize(cfg, "pipeline.train_epochs")? {
            hyper.epochs = epochs;
        }
        let mut mixture: Vec<MixtureItem> =
            vec![MixtureItem { data: &world.train, weight: world.train.len() as f64 }];
        if let Some((_, ds)) = &synth {
            mixture.push(MixtureItem { data: ds, weight: ds.len() as f64 });
        }
        let trained = train(base, &mixture, &world.val, &hyper)?;
        let value = metric_value(&trained, &world);
        let path = tuned_dir.join(format!("task-{}-{label}-s{seed}.ck", arch.as_str()));
        std::fs::create_dir_all(&tuned_dir).map_err(|e| Error::io(&tuned_dir, e))?;
        trained.save(&path)?;
        stage.artifact(run, &path)?;
        stage.metric(format!("{}.s{seed}", metric_name(world.cfg.kind)), value);
        println!(
            "s{seed} [{label}]: test {} {value:.4} -> {}",
            metric_name(world.cfg.kind),
            path.display()
        );
    }
    record_stage(run, &mut manifest, stage.finish())
}

fn cmd_sweep(run: &Path, cfg: &Config) -> Result<()> {
    let mut manifest = open_manifest(run, cfg)?;
    guard_stage(&manifest, "sweep")?;
    let stack = load_stack(run, cfg)?;
    let ctx = make_ctx(&stack, cfg)?;
    let methods = parse_methods(
        cfg,
        "pipeline.methods",
        &[Method::NoExtra, Method::Agnostic, Method::GuidedAdversarial],
    )?;
    let fractions = parse_f64_list(cfg, "pipeline.fractions", &SYNTH_FRACTIONS)?;
    let seeds = seeds_of(cfg)?;
    let regime = parse_regime(cfg)?;
    let out = run.join("sweep");
    let sweep = data_efficiency_sweep(
        &ctx,
        &methods,
        &fractions,
        &seeds,
        regime,
        &out,
        cfg.get_or("run.id", "run"),
    )?;
    let mut stage = StageBuilder::new("sweep");
    stage.artifact(run, &sweep.csv_path)?;
    stage.artifact(run, &sweep.manifest_path)?;
    let gen_root = out.join("gen");
    if gen_root.is_dir() {
        stage.artifact(run, &gen_root)?;
    }
    for r in &sweep.results {
        stage.metric(
            format!("mean.{}.{}", r.method.as_str(), r.fraction),
            r.mean,
        );
        let spread = match r.std {
            Some(s) => format!(" +- {s:.4}"),
            None => String::new(),
        };
        println!(
            "{:<20} fraction {:<7} {} {:.4}{spread}",
            r.method.as_str(),
            r.fraction,
            r.metric,
            r.mean
        );
    }
    for flag in &sweep.flags {
        println!("flag: {flag}");
    }
    println!("curve -> {}", sweep.csv_path.display());
    record_stage(run, &mut manifest, stage.finish())
}

fn cmd_transfer(run: &Path, cfg: &Config) -> Result<()> {
    let mut manifest = open_manifest(run, cfg)?;
    guard_stage(&manifest, "transfer")?;
    let stack = load_stack(run, cfg)?;
    let ctx = make_ctx(&stack, cfg)?;
    let other_arch = parse_arch(cfg, "transfer.other_arch", "mlp_wide")?;
    if other_arch == stack.model.arch {
        return Err(Error::config(
            "transfer.other_arch",
            "transfer needs two distinct architectures",
        ));
    }
    let other_path = model_path(run, &task_model_file(other_arch));
    require(
        &other_path,
        &format!("task model `{}`", other_arch.as_str()),
        "pretrain (with transfer.other_arch set)",
    )?;
    let other = TaskModel::load(&other_path)?;
    let out = run.join("transfer");
    let t = cross_model_transfer(&ctx, &other, &seeds_of(cfg)?, &out, cfg.get_or("run.id", "run"))?;
    let mut stage = StageBuilder::new("transfer");
    stage.artifact(run, &t.csv_path)?;
    stage.artifact(run, &t.manifest_path)?;
    println!("{:<12} {:>12} {:>12} {:>12}", "model", t.archs[0], t.archs[1], "agnostic");
    for (i, arch) in t.archs.iter().enumerate() {
        println!(
            "{arch:<12} {:>12.4} {:>12.4} {:>12.4}",
            t.acc_mean[i][0], t.acc_mean[i][1], t.agnostic_mean[i]
        );
        for j in 0..2 {
            stage.metric(format!("mean.{arch}.{}", t.archs[j]), t.acc_mean[i][j]);
            stage.metric(format!("bank_loss.{arch}.{}", t.archs[j]), t.bank_loss[i][j]);
        }
        stage.metric(format!("mean.{arch}.agnostic"), t.agnostic_mean[i]);
    }
    for flag in &t.flags {
        println!("flag: {flag}");
    }
    println!("table -> {}", t.csv_path.display());
    record_stage(run, &mut manifest, stage.finish())
}

fn cmd_verify(run: &Path) -> Result<()> {
    require(&run.join("manifest.json"), "run manifest", "build-world")?;
    let manifest = RunManifest::load(run)?;
    manifest.verify(run)?;
    let artifacts = manifest.artifact_paths().len();
    println!("all hashes match ({artifacts} artifacts across {} stages)", manifest.stages.len());
    Ok(())
}

fn cmd_render(data: &Path, id: &str, target: &str, out: &Path) -> Result<()> {
    require(&data.join("index.tsv"), "dataset index", "build-world or generate")?;
    let ds: ToyDataset = load_dataset(data)?;
    let ex = ds
        .examples
        .iter()
        .find(|e| e.id == id)
        .ok_or_else(|| {
            Error::config("render", format!("no example `{id}` among {} in {}", ds.len(), data.display()))
        })?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    match target {
        "image" => write_p6(out, SIDE, SIDE, &ex.image)?,
        "mask" => write_p5(out, SIDE, SIDE, &ex.mask)?,
        "depth" => {
            let map = ex.label.dense().ok_or_else(|| {
                Error::config("render", format!("example `{id}` has a class label, not a depth map"))
            })?;
            write_p5(out, SIDE, SIDE, map)?;
        }
        other => {
            return Err(Error::config(
                "render",
                format!("unknown target `{other}` (expected image, mask, or depth)"),
            ))
        }
    }
    println!("wrote {target} of {id} -> {}", out.display());
    Ok(())
}
