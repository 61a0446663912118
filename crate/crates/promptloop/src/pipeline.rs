//! End-to-end experiments: prompt acquisition per method, dataset generation
//! from banks, real/synthetic mixing at budget fractions, data-efficiency
//! sweeps, and cross-model transfer tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::dataio::dataset::save_dataset;
use crate::error::{Error, Result};
use crate::generator::{
    DenoiserParams, NoiseSchedule, PromptEmbedding, PromptProvenance, SamplerConfig,
    GEN_SAMPLE_STEPS,
};
use crate::guidance::{build_target, reference_norms, GuidanceTarget, JointEmbedder};
use crate::manifest::{fmt_f64, RunManifest, StageBuilder};
use crate::promptopt::{
    generate_round_robin, init_prompt, optimize_adversarial, optimize_guided,
    optimize_guided_adversarial, GuidanceSetup, OptRun, OptimConfig, StopReason,
};
use crate::rng::{mix, normal_vec, rng, str_tag};
use crate::taskmodels::{
    evaluate, loss_value, predict, train, LossKind, MixtureItem, Regime, TaskKind, TaskModel,
    TrainHyper,
};
use crate::toyworlds::{
    attr_embedding, group_pool, vocab_stats, ToyDataset, ToyExample, VocabEntry, World, WorldKind,
    EMBED_DIM, WILDSPOTS_TEST_LOCATIONS,
};

// ── Methods ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    NoExtra,
    Agnostic,
    RandomPrompt,
    Guided,
    Adversarial,
    GuidedAdversarial,
}

impl Method {
    pub fn all() -> [Method; 6] {
        [
            Method::NoExtra,
            Method::Agnostic,
            Method::RandomPrompt,
            Method::Guided,
            Method::Adversarial,
            Method::GuidedAdversarial,
        ]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NoExtra => "no_extra",
            Method::Agnostic => "agnostic",
            Method::RandomPrompt => "random_prompt",
            Method::Guided => "guided",
            Method::Adversarial => "adversarial",
            Method::GuidedAdversarial => "guided_adversarial",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::all().into_iter().find(|m| m.as_str() == s)
    }

    /// Methods whose prompts come out of an optimization loop.
    pub fn optimizes(self) -> bool {
        matches!(self, Method::Guided | Method::Adversarial | Method::GuidedAdversarial)
    }

    fn uses_guidance(self) -> bool {
        matches!(self, Method::Guided | Method::GuidedAdversarial)
    }
}

// ── Mixing policy ──

/// Allowed synthetic-budget fractions.
pub const SYNTH_FRACTIONS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

#[derive(Clone, Copy, Debug)]
pub struct MixturePolicy {
    /// Fraction of the full synthetic budget, from `SYNTH_FRACTIONS`.
    pub fraction: f64,
    /// Explicit example count; overrides the fraction when set.
    pub count: Option<usize>,
    pub regime: Regime,
}

impl MixturePolicy {
    pub fn full(regime: Regime) -> MixturePolicy {
        MixturePolicy { fraction: 1.0, count: None, regime }
    }

    pub fn at(fraction: f64, regime: Regime) -> MixturePolicy {
        MixturePolicy { fraction, count: None, regime }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count.is_none() && !SYNTH_FRACTIONS.contains(&self.fraction) {
            return Err(Error::config(
                "mixture.fraction",
                format!("{} not in {SYNTH_FRACTIONS:?} and no explicit count", self.fraction),
            ));
        }
        Ok(())
    }

    pub fn synthetic_count(&self, full_budget: usize) -> usize {
        match self.count {
            Some(c) => c,
            None => (self.fraction * full_budget as f64).round() as usize,
        }
    }
}

/// Deterministic evenly strided subset; subsets at divisible counts nest.
pub fn subset_stride(ds: &ToyDataset, count: usize) -> Result<ToyDataset> {
    if count == 0 || count > ds.len() {
        return Err(Error::config(
            "mixture",
            format!("subset of {count} from {} examples", ds.len()),
        ));
    }
    let examples = (0..count).map(|i| ds.examples[i * ds.len() / count].clone()).collect();
    Ok(ToyDataset { world: ds.world, split: format!("{}-{count}", ds.split), examples })
}

// ── Generation jobs ──

pub struct GenerationJob<'a> {
    pub prompts: Vec<&'a PromptEmbedding>,
    pub source: &'a ToyDataset,
    pub budget: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub split: String,
    /// Save the generated dataset here when set.
    pub out: Option<PathBuf>,
}

/// Round-robin the bank's prompts over the source pool (one sample per
/// source) and optionally persist the result.
pub fn generate_dataset(
    gen: &DenoiserParams,
    sch: &NoiseSchedule,
    job: &GenerationJob,
) -> Result<ToyDataset> {
    let sources: Vec<&ToyExample> = job.source.examples.iter().collect();
    let examples =
        generate_round_robin(gen, sch, &job.prompts, &sources, &job.sampler, job.seed, job.budget)?;
    let ds = ToyDataset { world: job.source.world, split: job.split.clone(), examples };
    if let Some(dir) = &job.out {
        save_dataset(&ds, dir)?;
    }
    Ok(ds)
}

// ── Results ──

pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub method: Method,
    pub fraction: f64,
    pub metric: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean: f64,
    /// Absent with fewer than two seeds.
    pub std: Option<f64>,
    pub synthetic_count: usize,
    pub manifest_hash: String,
}

/// Name of the headline test metric for a world kind.
pub fn metric_name(kind: WorldKind) -> &'static str {
    if kind.is_dense() {
        "mean_l1"
    } else {
        "balanced_accuracy"
    }
}

/// Headline test metric of a model on a world (see [`metric_name`]).
pub fn metric_value(model: &TaskModel, world: &World) -> f64 {
    let m = evaluate(model, &world.test);
    match model.task {
        TaskKind::Classify(_) => m.balanced_accuracy.unwrap_or(f64::NAN),
        TaskKind::Dense => m.mean_l1.unwrap_or(f64::NAN),
    }
}

/// Mean per-example task loss (cross-entropy or l1) of a frozen model.
pub fn mean_task_loss(model: &TaskModel, examples: &[ToyExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::config("mean_task_loss", "no examples"));
    }
    let loss = match model.task {
        TaskKind::Classify(_) => LossKind::Xent,
        TaskKind::Dense => LossKind::L1,
    };
    let mut total = 0.0;
    for ex in examples {
        total += loss_value(loss, model.task, &predict(model, &ex.image), &ex.label)?;
    }
    Ok(total / examples.len() as f64)
}

// ── Experiment context ──

pub struct PipelineCtx<'a> {
    pub world: &'a World,
    pub gen: &'a DenoiserParams,
    pub sch: &'a NoiseSchedule,
    pub embedder: &'a JointEmbedder,
    pub vocab: &'a [VocabEntry],
    pub pretrained: &'a TaskModel,
    pub stats: (Vec<f64>, Vec<f64>),
    pub ref_norms: Vec<f64>,
    pub opt: OptimConfig,
    pub guided_opt: OptimConfig,
    pub gen_sampler: SamplerConfig,
    /// Overrides the regime's default epoch count when set.
    pub train_epochs: Option<usize>,
    pub full_budget: usize,
    /// Prompts per class on per-class worlds, total otherwise.
    pub prompts: usize,
    /// Unlabeled images per guidance group.
    pub pool_per_group: usize,
}

impl<'a> PipelineCtx<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        world: &'a World,
        gen: &'a DenoiserParams,
        sch: &'a NoiseSchedule,
        embedder: &'a JointEmbedder,
        vocab: &'a [VocabEntry],
        pretrained: &'a TaskModel,
        full_budget: usize,
        seed: u64,
    ) -> PipelineCtx<'a> {
        let kind = world.cfg.kind;
        let opt = OptimConfig::defaults(kind, seed);
        let gen_sampler = SamplerConfig { steps: GEN_SAMPLE_STEPS, ..opt.sampler };
        PipelineCtx {
            world,
            gen,
            sch,
            embedder,
            vocab,
            pretrained,
            stats: vocab_stats(vocab),
            ref_norms: reference_norms(embedder, vocab),
            opt,
            guided_opt: OptimConfig::guided_defaults(kind, seed),
            gen_sampler,
            train_epochs: None,
            full_budget,
            prompts: 4,
            pool_per_group: 32,
        }
    }

    fn kind(&self) -> WorldKind {
        self.world.cfg.kind
    }

    fn class_sources(&self, class: Option<usize>) -> ToyDataset {
        let examples: Vec<ToyExample> = self
            .world
            .train
            .examples
            .iter()
            .filter(|e| class.is_none() || e.label.class() == class)
            .cloned()
            .collect();
        ToyDataset {
            world: self.kind(),
            split: match class {
                Some(c) => format!("train-c{c}"),
                None => "train".to_string(),
            },
            examples,
        }
    }
}

// ── Prompt acquisition ──

#[derive(Clone, Debug)]
pub struct BankedPrompt {
    pub prompt: PromptEmbedding,
    /// Source-class restriction the prompt was optimized and generates under.
    pub class: Option<usize>,
    pub task_loss: f64,
    pub guidance_loss: f64,
    /// Per-step optimization record; empty for unoptimized prompts.
    pub trace: Vec<crate::promptopt::TraceRow>,
}

struct PromptPlan {
    id: String,
    class: Option<usize>,
    target: GuidanceTarget,
}

fn guidance_plans(ctx: &PipelineCtx) -> Result<Vec<PromptPlan>> {
    match ctx.kind() {
        WorldKind::Spurbirds => {
            let texts = [
                attr_embedding(ctx.vocab, "background:stripes")?,
                attr_embedding(ctx.vocab, "background:dots")?,
            ];
            let target =
                build_target(ctx.embedder, &texts, &[], &ctx.ref_norms, 20.0, 0.0)?;
            let mut plans = Vec::new();
            for c in 0..2 {
                for k in 0..ctx.prompts {
                    plans.push(PromptPlan {
                        id: format!("c{c}-k{k}"),
                        class: Some(c),
                        target: target.clone(),
                    });
                }
            }
            Ok(plans)
        }
        WorldKind::Wildspots => {
            let mut plans = Vec::new();
            for &loc in &WILDSPOTS_TEST_LOCATIONS {
                for time in ["day", "night"] {
                    let pool = group_pool(&ctx.world.cfg, loc, time, ctx.pool_per_group);
                    let images: Vec<&[f64]> = pool.iter().map(|e| e.image.as_slice()).collect();
                    let target =
                        build_target(ctx.embedder, &[], &images, &ctx.ref_norms, 0.0, 10.0)?;
                    plans.push(PromptPlan { id: format!("l{loc}-{time}"), class: None, target });
                }
            }
            Ok(plans)
        }
        WorldKind::Depthrooms => {
            let texts = [
                attr_embedding(ctx.vocab, "style:blur")?,
                attr_embedding(ctx.vocab, "style:fog")?,
                attr_embedding(ctx.vocab, "style:noise")?,
            ];
            let pool = crate::toyworlds::generator_pool(&ctx.world.cfg, ctx.pool_per_group * 3);
            let images: Vec<&[f64]> = pool
                .examples
                .iter()
                .filter(|e| e.group.corruption.is_some())
                .take(ctx.pool_per_group)
                .map(|e| e.image.as_slice())
                .collect();
            let target = build_target(ctx.embedder, &texts, &images, &ctx.ref_norms, 1.0, 5.0)?;
            let plans = (0..ctx.prompts)
                .map(|k| PromptPlan { id: format!("k{k}"), class: None, target: target.clone() })
                .collect();
            Ok(plans)
        }
    }
}

fn unguided_plans(ctx: &PipelineCtx) -> Vec<PromptPlan> {
    match ctx.kind() {
        WorldKind::Spurbirds => (0..2)
            .flat_map(|c| {
                (0..ctx.prompts).map(move |k| (c, k))
            })
            .map(|(c, k)| PromptPlan {
                id: format!("c{c}-k{k}"),
                class: Some(c),
                target: GuidanceTarget::none(),
            })
            .collect(),
        WorldKind::Wildspots | WorldKind::Depthrooms => (0..ctx.prompts)
            .map(|k| PromptPlan { id: format!("k{k}"), class: None, target: GuidanceTarget::none() })
            .collect(),
    }
}

/// Produce the method's prompts against the given frozen model: fixed for
/// agnostic, sampled for random, optimized otherwise.
pub fn acquire_bank(
    ctx: &PipelineCtx,
    model: &TaskModel,
    method: Method,
    seed: u64,
) -> Result<Vec<BankedPrompt>> {
    match method {
        Method::NoExtra => Ok(Vec::new()),
        Method::Agnostic => {
            let scene = attr_embedding(ctx.vocab, "scene")?;
            let prompt = PromptEmbedding::new(
                "agnostic",
                crate::autodiff::Tensor::new(&[1, EMBED_DIM], scene.to_vec()),
                PromptProvenance { method: "agnostic".to_string(), seed, iteration: 0 },
            )?;
            Ok(vec![BankedPrompt {
                prompt,
                class: None,
                task_loss: f64::NAN,
                guidance_loss: 0.0,
                trace: Vec::new(),
            }])
        }
        Method::RandomPrompt => {
            let plans = unguided_plans(ctx);
            plans
                .into_iter()
                .enumerate()
                .map(|(k, plan)| {
                    let mut p = init_prompt(
                        ctx.opt.tokens,
                        &ctx.stats,
                        mix(seed, &[str_tag("random-prompt"), k as u64]),
                    )?;
                    p.id = format!("rand-{}", plan.id);
                    Ok(BankedPrompt {
                        prompt: p,
                        class: plan.class,
                        task_loss: f64::NAN,
                        guidance_loss: 0.0,
                        trace: Vec::new(),
                    })
                })
                .collect()
        }
        Method::Guided | Method::Adversarial | Method::GuidedAdversarial => {
            let plans =
                if method.uses_guidance() { guidance_plans(ctx)? } else { unguided_plans(ctx) };
            let base = if method == Method::Adversarial { &ctx.opt } else { &ctx.guided_opt };
            let mut bank = Vec::with_capacity(plans.len());
            for (k, plan) in plans.into_iter().enumerate() {
                let mut cfg = base.clone();
                cfg.seed = mix(seed, &[str_tag("opt"), str_tag(method.as_str()), k as u64]);
                if method == Method::Guided {
                    cfg.warmup_skip = 0;
                }
                let mut init = init_prompt(cfg.tokens, &ctx.stats, cfg.seed)?;
                init.id = format!("{}-{}", method.as_str(), plan.id);
                init.provenance.method = method.as_str().to_string();
                let source = ctx.class_sources(plan.class);
                let setup = GuidanceSetup::clip_only(ctx.embedder, plan.target);
                let run = match method {
                    Method::Adversarial => {
                        optimize_adversarial(model, ctx.gen, ctx.sch, &source, &cfg, init)?
                    }
                    Method::Guided => {
                        optimize_guided(model, ctx.gen, ctx.sch, &source, &setup, &cfg, init)?
                    }
                    _ => optimize_guided_adversarial(
                        model, ctx.gen, ctx.sch, &source, &setup, &cfg, init,
                    )?,
                };
                if let StopReason::NumericalAbort { step } = run.stop {
                    return Err(Error::numerical(
                        "acquire_bank",
                        format!("prompt {} aborted at step {step}", run.prompt.id),
                    ));
                }
                bank.push(banked(run, plan.class));
            }
            Ok(bank)
        }
    }
}

fn banked(run: OptRun, class: Option<usize>) -> BankedPrompt {
    let last = run.trace.last();
    BankedPrompt {
        prompt: run.prompt,
        class,
        task_loss: last.map_or(f64::NAN, |r| r.task_loss),
        guidance_loss: last.map_or(0.0, |r| r.guidance),
        trace: run.trace,
    }
}

// ── Synthesis ──

/// Generate from a bank of (prompt, class-lane) pairs, respecting per-class
/// restrictions: each class group round-robins its own prompts over its own
/// sources, with budget split proportional to group size.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_grouped(
    gen: &DenoiserParams,
    sch: &NoiseSchedule,
    source: &ToyDataset,
    sampler: &SamplerConfig,
    bank: &[(&PromptEmbedding, Option<usize>)],
    budget: usize,
    seed: u64,
    split: &str,
) -> Result<ToyDataset> {
    if bank.is_empty() {
        return Err(Error::config("synthesize", "empty prompt bank"));
    }
    let mut groups: BTreeMap<Option<usize>, Vec<&PromptEmbedding>> = BTreeMap::new();
    for (prompt, class) in bank {
        groups.entry(*class).or_default().push(prompt);
    }
    let sources: Vec<Vec<&ToyExample>> = groups
        .keys()
        .map(|class| {
            source
                .examples
                .iter()
                .filter(|e| class.is_none() || e.label.class() == *class)
                .collect()
        })
        .collect();
    let total: usize = sources.iter().map(|s| s.len()).sum();
    if budget > total {
        return Err(Error::config(
            "synthesize",
            format!("budget {budget} exceeds source pool of {total}"),
        ));
    }
    let mut examples = Vec::with_capacity(budget);
    let mut cum = 0usize;
    let mut allocated = 0usize;
    for (prompts, srcs) in groups.values().zip(&sources) {
        cum += srcs.len();
        let share = budget * cum / total - allocated;
        allocated += share;
        if share == 0 {
            continue;
        }
        examples.extend(generate_round_robin(gen, sch, prompts, srcs, sampler, seed, share)?);
    }
    debug_assert_eq!(examples.len(), budget);
    Ok(ToyDataset { world: source.world, split: split.to_string(), examples })
}

/// `synthesize_grouped` against the context's training split and sampler.
pub fn synthesize(
    ctx: &PipelineCtx,
    bank: &[BankedPrompt],
    budget: usize,
    seed: u64,
    split: &str,
) -> Result<ToyDataset> {
    let pairs: Vec<(&PromptEmbedding, Option<usize>)> =
        bank.iter().map(|b| (&b.prompt, b.class)).collect();
    synthesize_grouped(
        ctx.gen,
        ctx.sch,
        &ctx.world.train,
        &ctx.gen_sampler,
        &pairs,
        budget,
        seed,
        split,
    )
}

// ── Training on mixtures ──

fn train_eval(
    ctx: &PipelineCtx,
    template: &TaskModel,
    synth: Option<&ToyDataset>,
    policy: &MixturePolicy,
    method: Method,
    seed: u64,
) -> Result<(f64, usize)> {
    policy.validate()?;
    let count = match synth {
        Some(_) => policy.synthetic_count(ctx.full_budget),
        None => 0,
    };
    let subset = match synth {
        Some(ds) if count > 0 => Some(subset_stride(ds, count)?),
        _ => None,
    };
    let mut hyper = TrainHyper::defaults(
        policy.regime,
        mix(seed, &[str_tag("mix-train"), str_tag(method.as_str())]),
    );
    if let Some(epochs) = ctx.train_epochs {
        hyper.epochs = epochs;
    }
    let start = match policy.regime {
        Regime::Scratch => TaskModel::init(
            template.arch,
            template.task,
            mix(seed, &[str_tag("scratch-init"), str_tag(method.as_str())]),
        ),
        Regime::FinetuneLast => template.clone(),
    };
    let mut mixture =
        vec![MixtureItem { data: &ctx.world.train, weight: ctx.world.train.len() as f64 }];
    if let Some(s) = &subset {
        mixture.push(MixtureItem { data: s, weight: s.len() as f64 });
    }
    let tuned = train(start, &mixture, &ctx.world.val, &hyper)?;
    Ok((metric_value(&tuned, ctx.world), count))
}

fn cell_config(ctx: &PipelineCtx, methods: &[Method], policy_regime: Regime, seeds: &[u64]) -> Config {
    let mut c = Config::new();
    let wc = &ctx.world.cfg;
    c.set("world.kind", wc.kind.as_str());
    c.set("world.seed", wc.seed);
    c.set("world.train", wc.train);
    c.set("world.val", wc.val);
    c.set("world.test", wc.test);
    c.set("world.correlation", wc.correlation);
    c.set("pipeline.budget", ctx.full_budget);
    c.set("pipeline.prompts", ctx.prompts);
    c.set("pipeline.pool", ctx.pool_per_group);
    c.set("pipeline.regime", policy_regime.as_str());
    if let Some(e) = ctx.train_epochs {
        c.set("pipeline.train_epochs", e);
    }
    c.set("optim.hash", ctx.opt.hash());
    c.set("optim.guided_hash", ctx.guided_opt.hash());
    c.set(
        "pipeline.methods",
        methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
    );
    c.set(
        "pipeline.seeds",
        seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    );
    c
}

/// Run one method end to end over the seeds at one mixing policy.
pub fn run_method(
    ctx: &PipelineCtx,
    method: Method,
    policy: &MixturePolicy,
    seeds: &[u64],
) -> Result<ExperimentResult> {
    if seeds.is_empty() {
        return Err(Error::config("run_method", "need at least one seed"));
    }
    policy.validate()?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut synthetic_count = 0;
    for &s in seeds {
        let synth = match method {
            Method::NoExtra => None,
            _ => {
                let bank = acquire_bank(ctx, ctx.pretrained, method, s)?;
                Some(synthesize(
                    ctx,
                    &bank,
                    ctx.full_budget,
                    mix(s, &[str_tag("gen"), str_tag(method.as_str())]),
                    &format!("gen-{}", method.as_str()),
                )?)
            }
        };
        let (value, count) = train_eval(ctx, ctx.pretrained, synth.as_ref(), policy, method, s)?;
        synthetic_count = count;
        per_seed.push((s, value));
    }
    let (mean, std) = mean_std(&per_seed.iter().map(|&(_, v)| v).collect::<Vec<_>>());
    Ok(ExperimentResult {
        method,
        fraction: policy.fraction,
        metric: metric_name(ctx.kind()).to_string(),
        per_seed,
        mean,
        std,
        synthetic_count,
        manifest_hash: cell_config(ctx, &[method], policy.regime, seeds).hash_hex(),
    })
}

// ── Data-efficiency sweep ──

pub struct SweepOutput {
    pub results: Vec<ExperimentResult>,
    /// Soft-check warnings; never fail the sweep.
    pub flags: Vec<String>,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// One ExperimentResult per (method, fraction); prompts and generations are
/// produced once per (method, seed) at the full budget and subset per
/// fraction. Emits `curve.csv`, the generated datasets, and a manifest.
pub fn data_efficiency_sweep(
    ctx: &PipelineCtx,
    methods: &[Method],
    fractions: &[f64],
    seeds: &[u64],
    regime: Regime,
    out: &Path,
    run_id: &str,
) -> Result<SweepOutput> {
    if methods.is_empty() || fractions.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep", "methods, fractions, and seeds must be nonempty"));
    }
    for &f in fractions {
        MixturePolicy::at(f, regime).validate()?;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config = cell_config(ctx, methods, regime, seeds);
    let mut manifest = RunManifest::new(run_id, &config);
    let mut gen_stage = StageBuilder::new("generate");
    let mut sweep_stage = StageBuilder::new("sweep");

    let metric = metric_name(ctx.kind());
    let mut results = Vec::new();
    let mut csv = String::from("method,fraction,seed,metric,value\n");
    for &method in methods {
        // (seed, full synthetic dataset) pairs, reused across fractions
        let mut per_seed_synth: Vec<(u64, Option<ToyDataset>)> = Vec::new();
        for &s in seeds {
            let synth = match method {
                Method::NoExtra => None,
                _ => {
                    let bank = acquire_bank(ctx, ctx.pretrained, method, s)?;
                    let ds = synthesize(
                        ctx,
                        &bank,
                        ctx.full_budget,
                        mix(s, &[str_tag("gen"), str_tag(method.as_str())]),
                        &format!("gen-{}", method.as_str()),
                    )?;
                    let dir = out.join(format!("gen/{}-s{s}", method.as_str()));
                    save_dataset(&ds, &dir)?;
                    gen_stage.artifact(out, &dir)?;
                    Some(ds)
                }
            };
            per_seed_synth.push((s, synth));
        }
        gen_stage.metric(
            format!("synthetic.full.{}", method.as_str()),
            if method == Method::NoExtra { 0.0 } else { ctx.full_budget as f64 },
        );

        for &fraction in fractions {
            let policy = MixturePolicy::at(fraction, regime);
            let mut per_seed = Vec::new();
            let mut synthetic_count = 0;
            for (s, synth) in &per_seed_synth {
                let (value, count) =
                    train_eval(ctx, ctx.pretrained, synth.as_ref(), &policy, method, *s)?;
                synthetic_count = count;
                per_seed.push((*s, value));
                let _ = writeln!(csv, "{},{},{},{},{}", method.as_str(), fraction, s, metric, value);
                sweep_stage
                    .metric(format!("value.{}.{fraction}.s{s}", method.as_str()), value);
            }
            let (mean, std) = mean_std(&per_seed.iter().map(|&(_, v)| v).collect::<Vec<_>>());
            sweep_stage.metric(format!("mean.{}.{fraction}", method.as_str()), mean);
            results.push(ExperimentResult {
                method,
                fraction,
                metric: metric.to_string(),
                per_seed,
                mean,
                std,
                synthetic_count,
                manifest_hash: config.hash_hex(),
            });
        }
    }

    let csv_path = out.join("curve.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    sweep_stage.artifact(out, &csv_path)?;

    let flags = budget_sanity_flags(&results, fractions);
    manifest.push_stage(gen_stage.finish());
    manifest.push_stage(sweep_stage.finish());
    let manifest_path = manifest.save(out)?;
    Ok(SweepOutput { results, flags, csv_path, manifest_path })
}

/// Soft check: full-budget mean should not trail the smallest-fraction mean
/// by more than two of its standard deviations. Higher is better for
/// accuracy metrics; for l1 the comparison flips.
fn budget_sanity_flags(results: &[ExperimentResult], fractions: &[f64]) -> Vec<String> {
    let mut flags = Vec::new();
    let full = 1.0;
    let smallest = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    if !fractions.contains(&full) || smallest == full {
        return flags;
    }
    for r_full in results.iter().filter(|r| r.fraction == full && r.method != Method::NoExtra) {
        let Some(r_min) = results
            .iter()
            .find(|r| r.method == r_full.method && r.fraction == smallest)
        else {
            continue;
        };
        let sigma = r_min.std.unwrap_or(0.0);
        let lower_is_better = r_full.metric == "mean_l1";
        let bad = if lower_is_better {
            r_full.mean > r_min.mean + 2.0 * sigma
        } else {
            r_full.mean < r_min.mean - 2.0 * sigma
        };
        if bad {
            flags.push(format!(
                "{}: full-budget mean {} trails fraction-{} mean {} by more than 2 sigma ({})",
                r_full.method.as_str(),
                fmt_f64(r_full.mean),
                smallest,
                fmt_f64(r_min.mean),
                fmt_f64(sigma),
            ));
        }
    }
    flags
}

// ── Cross-model transfer ──

pub struct TransferOutput {
    pub archs: [String; 2],
    /// Mean metric of model m finetuned on the bank optimized against model b.
    pub acc_mean: [[f64; 2]; 2],
    pub acc_std: [[Option<f64>; 2]; 2],
    /// Each model finetuned on the agnostic-prompt dataset.
    pub agnostic_mean: [f64; 2],
    pub agnostic_std: [Option<f64>; 2],
    /// Mean pre-finetuning task loss of model m on bank b's generations.
    pub bank_loss: [[f64; 2]; 2],
    pub flags: Vec<String>,
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Optimize a guided-adversarial bank against each model, finetune each
/// model on each bank plus the agnostic baseline, and report metric means
/// plus each frozen model's loss on each bank's generations.
pub fn cross_model_transfer(
    ctx: &PipelineCtx,
    other: &TaskModel,
    seeds: &[u64],
    out: &Path,
    run_id: &str,
) -> Result<TransferOutput> {
    if seeds.is_empty() {
        return Err(Error::config("transfer", "need at least one seed"));
    }
    if other.task != ctx.pretrained.task {
        return Err(Error::config("transfer", "models must share the task"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let models = [ctx.pretrained, other];
    let policy = MixturePolicy::full(Regime::FinetuneLast);
    let metric = metric_name(ctx.kind());

    let mut acc: [[Vec<f64>; 2]; 2] = Default::default();
    let mut ag: [Vec<f64>; 2] = Default::default();
    let mut loss: [[Vec<f64>; 2]; 2] = Default::default();
    let mut csv = String::from("model,bank,seed,metric,value\n");

    for &s in seeds {
        let mut banksets = Vec::new();
        for (b, model) in models.iter().enumerate() {
            let bank = acquire_bank(
                ctx,
                model,
                Method::GuidedAdversarial,
                mix(s, &[str_tag("bank"), b as u64]),
            )?;
            let ds = synthesize(
                ctx,
                &bank,
                ctx.full_budget,
                mix(s, &[str_tag("transfer-gen"), b as u64]),
                &format!("gen-bank{b}"),
            )?;
            banksets.push(ds);
        }
        let ag_bank = acquire_bank(ctx, ctx.pretrained, Method::Agnostic, s)?;
        let ag_ds = synthesize(
            ctx,
            &ag_bank,
            ctx.full_budget,
            mix(s, &[str_tag("transfer-gen-agnostic")]),
            "gen-agnostic",
        )?;

        for (m, model) in models.iter().enumerate() {
            for (b, ds) in banksets.iter().enumerate() {
                let (value, _) = train_eval(
                    ctx,
                    model,
                    Some(ds),
                    &policy,
                    Method::GuidedAdversarial,
                    mix(s, &[str_tag("transfer-train"), m as u64, b as u64]),
                )?;
                acc[m][b].push(value);
                let _ = writeln!(csv, "{},{},{s},{metric},{value}", models[m].arch.as_str(), models[b].arch.as_str());
                let l = mean_task_loss(model, &ds.examples)?;
                loss[m][b].push(l);
                let _ = writeln!(
                    csv,
                    "{},{},{s},bank_loss,{l}",
                    models[m].arch.as_str(),
                    models[b].arch.as_str()
                );
            }
            let (value, _) = train_eval(
                ctx,
                model,
                Some(&ag_ds),
                &policy,
                Method::Agnostic,
                mix(s, &[str_tag("transfer-train-agnostic"), m as u64]),
            )?;
            ag[m].push(value);
            let _ = writeln!(csv, "{},agnostic,{s},{metric},{value}", models[m].arch.as_str());
        }
    }

    let mut acc_mean = [[0.0; 2]; 2];
    let mut acc_std = [[None; 2]; 2];
    let mut bank_loss = [[0.0; 2]; 2];
    for m in 0..2 {
        for b in 0..2 {
            let (mean, std) = mean_std(&acc[m][b]);
            acc_mean[m][b] = mean;
            acc_std[m][b] = std;
            bank_loss[m][b] = mean_std(&loss[m][b]).0;
        }
    }
    let (ag0, ag0s) = mean_std(&ag[0]);
    let (ag1, ag1s) = mean_std(&ag[1]);

    let mut flags = Vec::new();
    for m in 0..2 {
        let diag = acc_mean[m][m];
        let off = acc_mean[m][1 - m];
        let sigma = acc_std[m][m].unwrap_or(0.0).max(acc_std[m][1 - m].unwrap_or(0.0));
        if diag < off {
            flags.push(format!(
                "{}: diagonal mean {} below off-diagonal {}",
                models[m].arch.as_str(),
                fmt_f64(diag),
                fmt_f64(off)
            ));
        } else if diag - off < sigma {
            flags.push(format!(
                "{}: diagonal margin {} below 1 sigma ({})",
                models[m].arch.as_str(),
                fmt_f64(diag - off),
                fmt_f64(sigma)
            ));
        }
    }

    let csv_path = out.join("transfer.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let config = cell_config(ctx, &[Method::GuidedAdversarial, Method::Agnostic], policy.regime, seeds);
    let mut manifest = RunManifest::new(run_id, &config);
    let mut stage = StageBuilder::new("transfer");
    stage.artifact(out, &csv_path)?;
    for m in 0..2 {
        for b in 0..2 {
            stage.metric(
                format!("acc.{}.{}", models[m].arch.as_str(), models[b].arch.as_str()),
                acc_mean[m][b],
            );
            stage.metric(
                format!("loss.{}.{}", models[m].arch.as_str(), models[b].arch.as_str()),
                bank_loss[m][b],
            );
        }
        stage.metric(format!("acc.{}.agnostic", models[m].arch.as_str()), [ag0, ag1][m]);
    }
    manifest.push_stage(stage.finish());
    let manifest_path = manifest.save(out)?;

    Ok(TransferOutput {
        archs: [models[0].arch.as_str().to_string(), models[1].arch.as_str().to_string()],
        acc_mean,
        acc_std,
        agnostic_mean: [ag0, ag1],
        agnostic_std: [ag0s, ag1s],
        bank_loss,
        flags,
        csv_path,
        manifest_path,
    })
}

// ── Early-stop calibration ──

/// Task loss of a trained model on a heavily noise-corrupted copy of the
/// validation split: an upper reference for "the model is being hurt as
/// much as a strong shift hurts it", usable as an optimization early-stop
/// threshold.
pub fn calibrate_early_stop(
    model: &TaskModel,
    world: &World,
    noise_sd: f64,
    seed: u64,
) -> Result<f64> {
    if world.val.is_empty() {
        return Err(Error::config("calibrate", "empty validation split"));
    }
    let corrupted: Vec<ToyExample> = world
        .val
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut r = rng(mix(seed, &[str_tag("calibrate"), i as u64]));
            let mut ex = ex.clone();
            for (v, z) in ex.image.iter_mut().zip(normal_vec(&mut r, crate::toyworlds::IMG_LEN)) {
                *v = (*v + noise_sd * z).clamp(0.0, 1.0);
            }
            ex
        })
        .collect();
    mean_task_loss(model, &corrupted)
}
